//! Weakly self-dual linear codes, their CSS codes, and the code-check game in
//! which one special prover is checked against a linear combination of the rest.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::{
    qlowdeg_tests, Answer, Decide, Game, LowDeg, PairTest, PauliProver, Round, Strategy, Verdict,
};
use crate::gf::{Elem, Field, FieldRef, FieldSpec};
use crate::qsim::{identity, pauli_word, Basis, Mat, StateVec, C64, MATRIX_CAP, STATE_CAP_BITS};
use crate::rmpoly::{rref, CoordInjection};

#[derive(Clone, Debug)]
pub struct LinearCode {
    pub f: FieldRef,
    pub k: usize,
    pub k2: usize,
    /// Generator, k rows of k2 entries.
    pub g: Vec<Vec<Elem>>,
    /// Parity check, (k - k2) rows of k entries, with K G = 0.
    pub parity: Vec<Vec<Elem>>,
    pub self_dual: bool,
}

fn transpose(m: &[Vec<Elem>], cols: usize) -> Vec<Vec<Elem>> {
    (0..cols).map(|c| m.iter().map(|r| r[c]).collect()).collect()
}

/// Basis of {x : A x = 0} for A given by rows over `cols` columns.
pub fn nullspace(f: &Field, rows: &[Vec<Elem>], cols: usize) -> Vec<Vec<Elem>> {
    let (r, piv) = rref(f, rows);
    (0..cols)
        .filter(|c| !piv.contains(c))
        .map(|free| {
            let mut x = vec![0; cols];
            x[free] = 1;
            for (row, &p) in r.iter().zip(&piv) {
                x[p] = f.neg(row[free]);
            }
            x
        })
        .collect()
}

pub fn validate_code(f: &FieldRef, g: Vec<Vec<Elem>>) -> Result<LinearCode> {
    let k = g.len();
    let k2 = g.first().map_or(0, |r| r.len());
    if k == 0 || k2 == 0 || g.iter().any(|r| r.len() != k2) {
        return Err(Error::InvalidParam("generator must be a non-empty k x k' matrix".into()));
    }
    if g.iter().flatten().any(|&x| x >= f.q()) {
        return Err(Error::InvalidOperand("generator entry outside the field".into()));
    }
    let cols = transpose(&g, k2);
    let rank = rref(f, &cols).0.len();
    if rank != k2 {
        return Err(Error::RankDeficient { rank, expected: k2 });
    }
    let self_dual = cols.iter().all(|a| cols.iter().all(|b| f.dot(a, b) == 0));
    if !self_dual {
        return Err(Error::NotSelfDual);
    }
    let parity = nullspace(f, &cols, k);
    Ok(LinearCode { f: f.clone(), k, k2, g, parity, self_dual })
}

impl LinearCode {
    pub fn columns(&self) -> Vec<Vec<Elem>> {
        transpose(&self.g, self.k2)
    }

    /// All codewords G c.
    pub fn codewords(&self) -> Vec<Vec<Elem>> {
        let f = &self.f;
        let cols = self.columns();
        (0..(f.q() as usize).pow(self.k2 as u32))
            .map(|i| {
                let c = f.vec_from_index(i, self.k2);
                cols.iter().zip(&c).fold(vec![0; self.k], |acc, (col, &ci)| f.add_vec(&acc, &f.scale_vec(ci, col)))
            })
            .collect()
    }

    pub fn logical_count(&self) -> usize {
        self.k - 2 * self.k2
    }
}

#[derive(Clone, Debug)]
pub struct CssCode {
    pub code: LinearCode,
    /// Stabilizer generators: for each column of G, its X word and its Z word.
    pub stabilizers: Vec<(Basis, Vec<Elem>)>,
    /// Dense projector onto the codespace, when q^k fits the matrix cap.
    pub projector: Option<Mat>,
}

pub fn css_from_code(code: &LinearCode) -> Result<CssCode> {
    let f = &code.f;
    let sites = code.k;
    if sites as f64 * (f.q() as f64).log2() > STATE_CAP_BITS + 1e-9 {
        return Err(Error::DimensionCap(format!("{sites} qudits of dimension {} exceed 2^24 amplitudes", f.q())));
    }
    let mut stabilizers = vec![];
    for w in [Basis::X, Basis::Z] {
        for col in code.columns() {
            stabilizers.push((w, col));
        }
    }
    let dim = (f.q() as usize).pow(code.k as u32);
    let projector = if dim <= MATRIX_CAP {
        let mut proj = identity(dim);
        for (w, col) in &stabilizers {
            let mut avg = Mat::zeros(dim, dim);
            for c in f.elements() {
                avg += pauli_word(f, *w, &f.scale_vec(c, col))?.to_dense(f)?;
            }
            proj = proj * avg / C64::new(f.q() as f64, 0.0);
        }
        Some(proj)
    } else {
        None
    };
    Ok(CssCode { code: code.clone(), stabilizers, projector })
}

impl CssCode {
    pub fn f(&self) -> &FieldRef {
        &self.code.f
    }

    pub fn k(&self) -> usize {
        self.code.k
    }

    /// q^(k - 2k').
    pub fn codespace_dim(&self) -> f64 {
        (self.f().q() as f64).powi(self.code.logical_count() as i32)
    }

    /// Uniform superposition over the codewords, which is P|0..0> normalized.
    pub fn logical_zero(&self) -> Vec<C64> {
        let f = self.f();
        let q = f.q() as usize;
        let words = self.code.codewords();
        let a = C64::new(1.0 / (words.len() as f64).sqrt(), 0.0);
        let mut v = vec![C64::new(0.0, 0.0); q.pow(self.k() as u32)];
        for w in &words {
            v[crate::qsim::msd_index(w, q)] = a;
        }
        v
    }

    /// Logical basis |a> = tau_X(a xbar)|0>, or just the code state when nothing is encoded.
    pub fn logical_basis(&self) -> Result<Vec<Vec<C64>>> {
        let f = self.f();
        let zero = self.logical_zero();
        let Ok((xbar, _)) = logical_ops(self) else { return Ok(vec![zero]) };
        let psi = StateVec { q: f.q() as usize, sites: self.k(), amps: zero };
        Ok(f.elements().map(|a| pauli_word(f, Basis::X, &f.scale_vec(a, &xbar)).unwrap().apply(f, &psi, 0).amps).collect())
    }
}

/// Logical words (xbar, zbar) in ker(G^T) outside colspan(G), with xbar . zbar = 1.
pub fn logical_ops(code: &CssCode) -> Result<(Vec<Elem>, Vec<Elem>)> {
    let c = &code.code;
    let f = &c.f;
    if c.logical_count() == 0 {
        return Err(Error::NoLogicalQudit);
    }
    let dual = nullspace(f, &c.columns(), c.k);
    let (dual, _) = rref(f, &dual);
    let cols = c.columns();
    let rank_with = |v: &Vec<Elem>| {
        let mut rows = cols.clone();
        rows.push(v.clone());
        rref(f, &rows).0.len()
    };
    let xbar = dual.iter().find(|v| rank_with(v) > c.k2).cloned().ok_or(Error::NoLogicalQudit)?;
    let z = dual.iter().find(|v| f.dot(&xbar, v) != 0).ok_or(Error::NoLogicalQudit)?;
    let zbar = f.scale_vec(f.inv(f.dot(&xbar, z))?, z);
    Ok((xbar, zbar))
}

/// Block-wise encoding: site i of `psi` becomes k sites i*k..(i+1)*k.
pub fn encode_state(psi: &StateVec, code: &CssCode) -> Result<StateVec> {
    let f = code.f();
    let q = f.q() as usize;
    if psi.q != q {
        return Err(Error::DimensionMismatch(format!("state qudits of dimension {} vs q = {q}", psi.q)));
    }
    let sites = psi.sites * code.k();
    if sites as f64 * (q as f64).log2() > STATE_CAP_BITS + 1e-9 {
        return Err(Error::DimensionCap(format!("{sites} encoded sites exceed 2^24 amplitudes")));
    }
    code.code.logical_count().checked_sub(1).ok_or(Error::NoLogicalQudit)?;
    let basis = code.logical_basis()?;
    Ok(StateVec { q, sites, amps: encode_with(&psi.amps, psi.sites, q, &basis) })
}

fn encode_with(amps: &[C64], sites: usize, q: usize, basis: &[Vec<C64>]) -> Vec<C64> {
    let bd = basis[0].len();
    let mut cur = amps.to_vec();
    // Replace site i (dimension q) by a block of dimension bd, left to right.
    for i in 0..sites {
        let left = bd.pow(i as u32);
        let right = q.pow((sites - i - 1) as u32);
        let mut next = vec![C64::new(0.0, 0.0); left * bd * right];
        for l in 0..left {
            for a in 0..q {
                for r in 0..right {
                    let amp = cur[(l * q + a) * right + r];
                    if amp.norm_sqr() == 0.0 {
                        continue;
                    }
                    for (b, &e) in basis[a].iter().enumerate() {
                        if e.norm_sqr() != 0.0 {
                            next[(l * bd + b) * right + r] += amp * e;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// `blocks` copies of the code state (logical zero).
pub fn code_blocks(code: &CssCode, blocks: usize) -> Result<StateVec> {
    let q = code.f().q() as usize;
    let sites = blocks * code.k();
    if sites as f64 * (q as f64).log2() > STATE_CAP_BITS + 1e-9 {
        return Err(Error::DimensionCap(format!("{sites} encoded sites exceed 2^24 amplitudes")));
    }
    let zero = code.logical_zero();
    let mut amps = vec![C64::new(1.0, 0.0)];
    for _ in 0..blocks {
        amps = amps.iter().flat_map(|a| zero.iter().map(move |b| a * b)).collect();
    }
    Ok(StateVec { q, sites, amps })
}

/// Reorders block-major sites (block b, qudit j at b*k + j) so each player's
/// qudits are contiguous (player j, block b at j*blocks + b).
pub fn player_major(psi: &StateVec, k: usize) -> StateVec {
    let blocks = psi.sites / k;
    let perm: Vec<usize> = (0..k).flat_map(|j| (0..blocks).map(move |b| b * k + j)).collect();
    psi.permute_sites(&perm)
}

// ---------------------------------------------------------------- routing

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeRouting {
    pub t: usize,
    pub v: Vec<Elem>,
}

/// Every codeword v with v_t = 1, in enumeration order.
pub fn routings(code: &LinearCode, t: usize) -> Vec<Vec<Elem>> {
    code.codewords().into_iter().filter(|v| v[t] == 1).collect()
}

/// Uniform special index and uniform v in colspan(G) with v_t = 1.
pub fn sample_routing<R: Rng + ?Sized>(code: &LinearCode, rng: &mut R) -> Result<CompositeRouting> {
    let t = rng.gen_range(0..code.k);
    let vs = routings(code, t);
    if vs.is_empty() {
        return Err(Error::InvalidParam(format!("no codeword with a 1 in position {t}")));
    }
    Ok(CompositeRouting { t, v: vs[rng.gen_range(0..vs.len())].clone() })
}

/// -sum_{j != t} v_j A_j in the answers' own format.
pub fn composite_answer(f: &Field, answers: &[&Answer], r: &CompositeRouting) -> Result<Answer> {
    if answers.len() != r.v.len() {
        return Err(Error::LengthMismatch(answers.len(), r.v.len()));
    }
    let mut acc: Option<Answer> = None;
    for (j, (a, &vj)) in answers.iter().zip(&r.v).enumerate() {
        if j == r.t {
            continue;
        }
        let term = a.scale(f, vj)?;
        acc = Some(match acc {
            None => term,
            Some(s) => s.add(f, &term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidParam("a composite prover needs k >= 2".into()))?.neg(f)
}

// ---------------------------------------------------------------- code-check

/// Frames sent with each query: the special prover's, then the composite provers'.
pub type Frames = (Option<Vec<usize>>, Option<Vec<usize>>);

/// k-player rounds from two-player checks: uniform special index t, the
/// composite answer averaged over the admissible v.
pub fn codecheck_rounds(code: &LinearCode, tests: Vec<PairTest>, frames: &Frames) -> Result<Vec<Round>> {
    routed_rounds(code, frames, |_| Ok(tests.clone()))
}

/// As `codecheck_rounds`, with checks that may depend on the special index.
pub fn routed_rounds(code: &LinearCode, frames: &Frames, tests_for: impl Fn(usize) -> Result<Vec<PairTest>>) -> Result<Vec<Round>> {
    let k = code.k;
    let f = code.f.clone();
    let mut rounds = vec![];
    for t in 0..k {
        let vs = Arc::new(routings(code, t));
        if vs.is_empty() {
            return Err(Error::InvalidParam(format!("no codeword with a 1 in position {t}")));
        }
        for test in tests_for(t)? {
            let mut qs = vec![test.second.clone().framed(frames.1.as_deref()); k];
            qs[t] = test.first.clone().framed(frames.0.as_deref());
            let (fr, vs2, dec) = (f.clone(), vs.clone(), test.decide.clone());
            let decide: Decide = Arc::new(move |a: &[&Answer]| {
                let (mut acc, mut val, mut nval) = (0.0, 0.0, 0usize);
                for v in vs2.iter() {
                    let r = CompositeRouting { t, v: v.clone() };
                    let verdict = match composite_answer(&fr, a, &r) {
                        Ok(c) => dec(a[t], &c),
                        Err(_) => Verdict::reject(),
                    };
                    acc += verdict.accept;
                    if let Some(x) = verdict.value {
                        val += x;
                        nval += 1;
                    }
                }
                let n = vs2.len() as f64;
                Verdict { accept: acc / n, value: (nval > 0).then(|| val / nval as f64) }
            });
            rounds.push(Round { weight: test.weight / k as f64, branch: test.branch.clone(), questions: qs, decide });
        }
    }
    Ok(rounds)
}

/// Parameters shared by code-check instances.
#[derive(Clone, Debug)]
pub struct CodeCheck {
    pub code: LinearCode,
    pub ld: LowDeg,
    pub inj: CoordInjection,
}

impl CodeCheck {
    /// Smallest m >= 2 with h^m >= n; degree h m.
    pub fn new(code: LinearCode, n: usize, h: u32, level: u8) -> Result<Self> {
        let f = code.f.clone();
        if f.p() != 2 {
            return Err(Error::UnsupportedPrime(f.p()));
        }
        let mut m = 2;
        while (h as u64).pow(m as u32) < n as u64 {
            m += 1;
        }
        let inj = CoordInjection::new(n, h, m, f.q())?;
        let ld = LowDeg::new(f, m, h * m as u32, level)?;
        Ok(Self { code, ld, inj })
    }

    pub fn tests(&self) -> Result<Vec<PairTest>> {
        qlowdeg_tests(&self.ld, &self.inj)
    }
}

pub fn codecheck_game(cc: &CodeCheck) -> Result<Game> {
    let rounds = codecheck_rounds(&cc.code, cc.tests()?, &(None, None))?;
    Game::new(format!("code-check{}", cc.ld.level), cc.code.k, rounds)
}

/// Player-major state of k provers, each holding n data blocks plus one
/// ancilla block. `psi` (n qudits) is encoded with an ancilla |0> when the code
/// has a logical qudit; otherwise every block holds the code state.
pub fn shared_state(css: &CssCode, n: usize, psi: Option<&StateVec>) -> Result<StateVec> {
    let f = css.f();
    let blocks = match psi {
        Some(p) => {
            if p.sites != n {
                return Err(Error::DimensionMismatch(format!("state on {} qudits, test on {n}", p.sites)));
            }
            let anc = StateVec::basis_state(f.q() as usize, &[0]);
            encode_state(&p.kron(&anc), css)?
        }
        None => code_blocks(css, n + 1)?,
    };
    Ok(player_major(&blocks, css.k()))
}

/// Honest code-check strategy: every prover runs the Pauli prover on its share.
pub fn codecheck_strategy(cc: &CodeCheck, css: &CssCode, psi: Option<&StateVec>) -> Result<Strategy> {
    pauli_strategy_on(cc, shared_state(css, cc.inj.n, psi)?)
}

/// Same provers on an arbitrary (possibly unencoded) state in player-major order.
pub fn pauli_strategy_on(cc: &CodeCheck, state: StateVec) -> Result<Strategy> {
    let prover = PauliProver::new(cc.ld.clone(), cc.inj.clone())?;
    let d = prover.local_dim();
    Strategy::new(state, vec![d; cc.code.k], Arc::new(prover))
}

// ---------------------------------------------------------------- catalog and text format

/// Shipped codes: "epr" (q even: (1,1); q = 1 mod 4: (1, sqrt(-1))), "steane", "rep4".
pub fn catalog(name: &str, f: &FieldRef) -> Result<LinearCode> {
    let g: Vec<Vec<Elem>> = match name {
        "epr" => {
            if f.p() == 2 {
                vec![vec![1], vec![1]]
            } else {
                let i = f.elements().find(|&x| f.mul(x, x) == f.neg(1)).ok_or_else(|| {
                    Error::InvalidParam(format!("-1 is not a square in GF({})", f.q()))
                })?;
                vec![vec![1], vec![i]]
            }
        }
        "steane" => {
            // Columns are the rows of the [7,4] Hamming parity check.
            let h = [[0, 0, 0, 1, 1, 1, 1], [0, 1, 1, 0, 0, 1, 1], [1, 0, 1, 0, 1, 0, 1]];
            (0..7).map(|i| h.iter().map(|r| r[i]).collect()).collect()
        }
        "rep4" => vec![vec![1]; 4],
        _ => return Err(Error::InvalidParam(format!("unknown code {name:?}"))),
    };
    validate_code(f, g)
}

/// Parses "p t k k'" (commas or spaces) followed by k rows of k' entries, each
/// entry t base-p digits, lowest power first. `#` starts a comment.
pub fn parse_code(text: &str) -> Result<LinearCode> {
    let mut lines = text.lines().map(|l| l.split('#').next().unwrap().trim()).filter(|l| !l.is_empty());
    let nums = |l: &str| -> Result<Vec<usize>> {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))))
            .collect()
    };
    let head = nums(lines.next().ok_or_else(|| Error::Parse("empty code file".into()))?)?;
    let [p, t, k, k2] = head[..] else { return Err(Error::Parse("header must be: p t k k'".into())) };
    let f = Field::new(FieldSpec::canonical(p as u32, t as u32)?)?;
    let mut g = vec![];
    for _ in 0..k {
        let line = lines.next().ok_or_else(|| Error::Parse(format!("expected {k} generator rows")))?;
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                let d: Vec<u32> = s.chars().map(|c| c.to_digit(10).ok_or_else(|| Error::Parse(format!("bad digit in {s:?}")))).collect::<Result<_>>()?;
                f.from_digits(&d).map_err(|_| Error::Parse(format!("entry {s:?} needs {t} digits below {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != k2 {
            return Err(Error::Parse(format!("row {line:?} has {} entries, expected {k2}", row.len())));
        }
        g.push(row);
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing content after generator rows".into()));
    }
    validate_code(&f, g)
}

pub fn format_code(c: &LinearCode) -> String {
    let f = &c.f;
    let mut s = format!("{} {} {} {}\n", f.p(), f.t(), c.k, c.k2);
    for row in &c.g {
        let cells: Vec<String> = row.iter().map(|&x| f.digits(x).iter().map(|d| d.to_string()).collect()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

/// Stabilizer expectation <psi| S |psi> on one block starting at `first`.
pub fn stabilizer_expectation(css: &CssCode, psi: &StateVec, w: Basis, word: &[Elem], first: usize) -> Result<C64> {
    let f = css.f();
    let image = pauli_word(f, w, word)?.apply(f, psi, first);
    Ok(psi.inner(&image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{exact_value, pair_game, perturbed_strategy};
    use crate::qsim::epr_state;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gf(p: u32, t: u32) -> FieldRef {
        Field::canonical(p, t).unwrap()
    }

    #[test]
    fn validation() {
        let f = gf(2, 1);
        let c = catalog("epr", &f).unwrap();
        assert_eq!((c.k, c.k2), (2, 1));
        assert_eq!(c.parity, vec![vec![1, 1]]);
        let s = catalog("steane", &f).unwrap();
        // G^T G computed independently with integer arithmetic mod 2.
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(s.g.iter().map(|r| r[a] * r[b]).sum::<u32>() % 2, 0);
            }
        }
        for row in &s.parity {
            for col in s.columns() {
                assert_eq!(f.dot(row, &col), 0);
            }
        }
        assert_eq!(s.parity.len(), 4);
        assert!(matches!(validate_code(&f, vec![vec![1], vec![0]]), Err(Error::NotSelfDual)));
        assert!(matches!(validate_code(&f, vec![vec![1, 1], vec![1, 1]]), Err(Error::RankDeficient { rank: 1, expected: 2 })));
        let f5 = gf(5, 1);
        assert_eq!(catalog("epr", &f5).unwrap().g, vec![vec![1], vec![2]]);
        assert!(catalog("epr", &gf(3, 1)).is_err());
    }

    #[test]
    fn epr_codespace() {
        let f = gf(2, 1);
        let css = css_from_code(&catalog("epr", &f).unwrap()).unwrap();
        assert!((css.codespace_dim() - 1.0).abs() < 1e-12);
        assert!((css.projector.as_ref().unwrap().trace().re - 1.0).abs() < 1e-12);
        let z = css.logical_zero();
        let h = 1.0 / 2f64.sqrt();
        let want = [h, 0.0, 0.0, h];
        for (a, b) in z.iter().zip(want) {
            assert!((a - C64::new(b, 0.0)).norm() < 1e-12);
        }
        assert!(matches!(logical_ops(&css), Err(Error::NoLogicalQudit)));
    }

    fn code_words_set(css: &CssCode) -> Vec<Vec<Elem>> {
        css.code.codewords()
    }

    #[test]
    fn steane_code() {
        for t in [1, 2] {
            let f = gf(2, t);
            let css = css_from_code(&catalog("steane", &f).unwrap()).unwrap();
            assert!((css.codespace_dim() - f.q() as f64).abs() < 1e-9);
            let (x, z) = logical_ops(&css).unwrap();
            assert_eq!(f.dot(&x, &z), 1);
            // Chosen words and the all-ones word are all logical: orthogonal to G, outside C.
            let words = code_words_set(&css);
            for w in [&x, &z, &vec![1; 7]] {
                assert!(css.code.columns().iter().all(|c| f.dot(w, c) == 0));
                assert!(!words.contains(w));
            }
            assert_eq!(f.dot(&vec![1; 7], &vec![1; 7]), 1);
            if t > 1 {
                assert!(css.projector.is_none());
                continue;
            }
            let p = css.projector.as_ref().unwrap();
            assert!((p * p - p).norm() < 1e-9);
            assert!((p.trace().re - 2.0).abs() < 1e-9);
            // Stabilizers pairwise commute.
            let mats: Vec<Mat> = css.stabilizers.iter().map(|(w, v)| pauli_word(&f, *w, v).unwrap().to_dense(&f).unwrap()).collect();
            for a in &mats {
                for b in &mats {
                    assert!((a * b - b * a).norm() < 1e-12);
                }
            }
            // tau_X(xbar) maps logical 0 to logical 1 and preserves the codespace.
            let basis = css.logical_basis().unwrap();
            let xl = pauli_word(&f, Basis::X, &x).unwrap().to_dense(&f).unwrap();
            let v0 = nalgebra::DVector::from_vec(basis[0].clone());
            let v1 = nalgebra::DVector::from_vec(basis[1].clone());
            assert!((&xl * &v0 - &v1).norm() < 1e-12);
            assert!((p * &v1 - &v1).norm() < 1e-12);
            assert!(v0.dotc(&v1).norm() < 1e-12);
            // The logical zero ray is the projector image of |0000000>.
            let raw = p.column(0).into_owned();
            assert!((v0.dotc(&raw).norm() - raw.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_intertwines_logical_paulis() {
        let f = gf(2, 1);
        let css = css_from_code(&catalog("steane", &f).unwrap()).unwrap();
        let (xbar, zbar) = logical_ops(&css).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let psi = StateVec::new(2, 1, vec![C64::new(h, 0.0), C64::new(0.0, h)]).unwrap();
        let enc = encode_state(&psi, &css).unwrap();
        for (w, bar) in [(Basis::X, &xbar), (Basis::Z, &zbar)] {
            let lhs = pauli_word(&f, w, bar).unwrap().apply(&f, &enc, 0);
            let rhs = encode_state(&pauli_word(&f, w, &[1]).unwrap().apply(&f, &psi, 0), &css).unwrap();
            assert!(lhs.sub(&rhs).norm() < 1e-12);
        }
        for (w, v) in &css.stabilizers {
            assert!((stabilizer_expectation(&css, &enc, *w, v, 0).unwrap() - 1.0).norm() < 1e-12);
        }
        let two = StateVec::basis_state(2, &[1, 0]);
        let enc2 = encode_state(&two, &css).unwrap();
        for b in 0..2 {
            for (w, v) in &css.stabilizers {
                assert!((stabilizer_expectation(&css, &enc2, *w, v, 7 * b).unwrap() - 1.0).norm() < 1e-12);
            }
        }
        let epr = css_from_code(&catalog("epr", &f).unwrap()).unwrap();
        assert!(matches!(encode_state(&psi, &epr), Err(Error::NoLogicalQudit)));
    }

    #[test]
    fn composite_answers() {
        let f = gf(2, 2);
        let a = [Answer::Value(3), Answer::Value(2)];
        let r = CompositeRouting { t: 0, v: vec![1, 1] };
        assert_eq!(composite_answer(&f, &[&a[0], &a[1]], &r).unwrap(), Answer::Value(2));
        let bad = [Answer::Value(3), Answer::Value(1), Answer::Bits(vec![1])];
        let r3 = CompositeRouting { t: 0, v: vec![1, 1, 1] };
        assert!(matches!(composite_answer(&f, &[&bad[0], &bad[1], &bad[2]], &r3), Err(Error::FormatMismatch(_))));
        let bits = [Answer::Bits(vec![1]), Answer::Bits(vec![1])];
        let r2 = CompositeRouting { t: 0, v: vec![1, 2] };
        assert!(matches!(composite_answer(&f, &[&bits[0], &bits[1]], &r2), Err(Error::FormatMismatch(_))));
    }

    #[test]
    fn routing_sampler_is_uniform_on_the_slice() {
        let f = gf(2, 1);
        let c = catalog("steane", &f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = std::collections::HashMap::new();
        let n = 28_000;
        for _ in 0..n {
            let r = sample_routing(&c, &mut rng).unwrap();
            assert_eq!(r.v[r.t], 1);
            assert!(c.codewords().contains(&r.v));
            *counts.entry((r.t, r.v)).or_insert(0usize) += 1;
        }
        // 7 positions x 4 codewords with a one there.
        assert_eq!(counts.len(), 28);
        for &cnt in counts.values() {
            assert!((cnt as f64 - 1000.0).abs() < 150.0, "{cnt}");
        }
    }

    #[test]
    fn text_format_round_trip() {
        let f = gf(2, 2);
        let c = catalog("steane", &f).unwrap();
        let back = parse_code(&format_code(&c)).unwrap();
        assert_eq!(back.g, c.g);
        let epr = parse_code("# EPR code\n2,1,2,1\n1\n1\n").unwrap();
        assert_eq!(epr.g, vec![vec![1], vec![1]]);
        assert!(matches!(parse_code("2 1 2 1\n1\n0\n"), Err(Error::NotSelfDual)));
        assert!(matches!(parse_code("2 1 2 1\n1\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_code("2 2 2 1\n1\n1\n"), Err(Error::Parse(_))));
    }

    fn cc(name: &str, n: usize, level: u8) -> (CodeCheck, CssCode) {
        let f = gf(2, 1);
        let code = catalog(name, &f).unwrap();
        let css = css_from_code(&code).unwrap();
        (CodeCheck::new(code, n, 2, level).unwrap(), css)
    }

    #[test]
    fn epr_code_check_is_the_two_player_test() {
        let (c, css) = cc("epr", 2, 1);
        let g = codecheck_game(&c).unwrap();
        let s = codecheck_strategy(&c, &css, None).unwrap();
        let two = pair_game("q", &c.ld.f, c.tests().unwrap()).unwrap();
        assert!((exact_value(&g, &s).unwrap().value - 1.0).abs() < 1e-9);
        // Same state as the two-player honest strategy, and equal values off the honest point.
        let epr = epr_state(&c.ld.f, c.inj.n + 1).unwrap();
        assert!(s.state.sub(&epr).norm() < 1e-12);
        for th in [0.0, 0.3] {
            let p = perturbed_strategy(&s, &c.ld.f, c.inj.n, th);
            let a = exact_value(&g, &p).unwrap().value;
            let b = exact_value(&two, &p).unwrap().value;
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn steane_code_check_completeness() {
        let (c, css) = cc("steane", 1, 1);
        let g = codecheck_game(&c).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let psi = StateVec::new(2, 1, vec![C64::new(h, 0.0), C64::new(h, 0.0)]).unwrap();
        for s in [codecheck_strategy(&c, &css, Some(&psi)).unwrap(), codecheck_strategy(&c, &css, None).unwrap()] {
            let r = exact_value(&g, &s).unwrap();
            assert!((r.value - 1.0).abs() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn unencoded_state_fails() {
        let (c, _) = cc("steane", 1, 1);
        let g = codecheck_game(&c).unwrap();
        let zero = StateVec::basis_state(2, &[0; 14]);
        let v = exact_value(&g, &pauli_strategy_on(&c, zero).unwrap()).unwrap().value;
        assert!(v < 1.0 - 1e-3, "{v}");
    }

    #[test]
    fn code_check_needs_p2() {
        let f = gf(5, 1);
        let code = catalog("epr", &f).unwrap();
        assert!(matches!(CodeCheck::new(code, 2, 2, 1), Err(Error::UnsupportedPrime(5))));
    }

    // Independent check of the linear-answer property: measuring every qudit of
    // an encoded state in a fixed basis, the special prover's outcome vector
    // equals the composite combination, with probability 1.
    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn linear_answers_agree(re in proptest::collection::vec(-1.0f64..1.0, 4), im in proptest::collection::vec(-1.0f64..1.0, 4),
                                wbits in 0u8..4, t in 0usize..7, kf in 0u32..16) {
            let f = gf(2, 1);
            let code = catalog("steane", &f).unwrap();
            let css = css_from_code(&code).unwrap();
            let amps: Vec<C64> = re.iter().zip(&im).map(|(a, b)| C64::new(*a, *b)).collect();
            let nrm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt().max(1e-9);
            let psi = StateVec::new(2, 2, amps.iter().map(|a| a / nrm).collect()).unwrap();
            let enc = encode_state(&psi, &css).unwrap();
            let ws = [if wbits & 1 == 1 { Basis::X } else { Basis::Z }, if wbits & 2 == 2 { Basis::X } else { Basis::Z }];
            // Rotate X-basis blocks to the computational basis.
            let mut st = enc.clone();
            for (b, w) in ws.iter().enumerate() {
                if *w == Basis::X {
                    for j in 0..7 {
                        st = st.apply_local(&crate::qsim::fourier(&f).adjoint(), 7 * b + j).unwrap();
                    }
                }
            }
            let lin = [kf & 3, kf >> 2];
            for v in routings(&code, t) {
                for (idx, a) in st.amps.iter().enumerate() {
                    if a.norm_sqr() < 1e-12 { continue; }
                    let d = crate::qsim::msd_digits(idx, 2, 14);
                    let y = |j: usize| -> u32 { (lin[0] * d[j] + lin[1] * d[7 + j]) % 2 };
                    let comp: u32 = (0..7).filter(|&j| j != t).map(|j| v[j] * y(j)).sum::<u32>() % 2;
                    prop_assert_eq!(comp, y(t));
                }
            }
        }
    }
}
