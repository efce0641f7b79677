use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid operand: {0}")]
    InvalidOperand(String),
    #[error("field spec mismatch: GF({0}^{1}) vs GF({2}^{3})")]
    SpecMismatch(u32, u32, u32, u32),
    #[error("modulus is not irreducible of degree {0} over Z_{1}")]
    NotIrreducible(u32, u32),
    #[error("no canonical modulus for GF({0}^{1})")]
    NoModulus(u32, u32),
    #[error("field too large: q = {0} exceeds 2^16")]
    FieldTooLarge(u64),
    #[error("GF({0}^{1}) has no self-dual basis")]
    NoSelfDualBasis(u32, u32),
    #[error("self-dual basis search exhausted (t = {0})")]
    SearchExhausted(u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("polynomial is identically zero")]
    ZeroPolynomial,
    #[error("too many points: {points} > q = {q}")]
    TooManyPoints { points: usize, q: u32 },
    #[error("dimension cap exceeded: {0}")]
    DimensionCap(String),
    #[error("operator is not normal (residual {0:e})")]
    NotNormal(f64),
    #[error("budget exceeded: about {estimate} evaluations needed, budget {budget}")]
    BudgetExceeded { estimate: u64, budget: u64 },
    #[error("unsupported prime p = {0}; the game layer needs p = 2")]
    UnsupportedPrime(u32),
    #[error("code is not weakly self-dual")]
    NotSelfDual,
    #[error("generator has rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },
    #[error("code encodes no logical qudit")]
    NoLogicalQudit,
    #[error("answer format mismatch: {0}")]
    FormatMismatch(String),
    #[error("qubit Hamiltonian has a Y factor in term {0}")]
    HasYTerm(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
