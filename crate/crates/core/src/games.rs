//! k-player games: the evaluation engine, the commutation and Magic Square
//! games, the classical and quantum low-degree tests, the honest Pauli
//! strategy and residual diagnostics.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::{Elem, Field, FieldRef};
use crate::qsim::{
    apply_axis, epr_state, fourier, identity, kron, omega_pow, tau, Basis, BasisMeasurement, GenObservable, Mat,
    ProjMeasurement, StateVec, C64, MATRIX_CAP,
};
use crate::rmpoly::{restrict, AffineSubspace, CoordInjection, Curve, Domain, MultiPoly};

/// Default evaluation budget for exact mode, in (round x amplitude) units.
pub const DEFAULT_BUDGET: u64 = 1 << 36;

// ---------------------------------------------------------------- questions

/// Context of a part-(b) question of the quantum low-degree test.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairCtx {
    pub x: Vec<Elem>,
    pub z: Vec<Elem>,
    pub u: Elem,
    pub u2: Elem,
    /// Physical basis of the X-role observable; toggled by basis flips.
    pub wx: Basis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsSlot {
    /// Rows 0..3, then columns 3..6.
    Line(u8),
    Cell(u8, u8),
}

/// Proof-table queries of the sum test.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SumQuery {
    /// Restrictions of g to `s` and of the proof extension to `s2`.
    Pair { s: AffineSubspace, s2: AffineSubspace },
    /// Point values of g and of the proof extension.
    Points { y: Vec<Elem>, y2: Vec<Elem> },
    /// Substituted restrictions evaluated at a point: g along `c` at `z`, h along `c2` at `z2`.
    Subst { c: Curve, z: Vec<Elem>, c2: Curve, z2: Vec<Elem> },
    /// Claimed value plus substituted restrictions along (outer, inner) curve pairs.
    Curves { g: Vec<(Curve, Curve)>, h: Vec<(Curve, Curve)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    Com(u8),
    Ms { ctx: Option<PairCtx>, slot: MsSlot },
    Sub { basis: Basis, s: AffineSubspace },
    Inner { basis: Basis, s: AffineSubspace, inner: AffineSubspace },
    Pair(PairCtx),
    Sum { basis: Basis, b: Vec<Elem>, query: SumQuery },
    /// Qudits in `set` are measured in the question's basis, the rest in the other one.
    Framed { set: Vec<usize>, inner: Box<Question> },
    Tag(String),
}

impl Question {
    pub fn point(basis: Basis, f: &Field, w: Vec<Elem>) -> Self {
        Question::Sub { basis, s: AffineSubspace::point(f, w) }
    }

    /// Same question with every basis label toggled.
    pub fn flipped(&self) -> Question {
        match self {
            Question::Sub { basis, s } => Question::Sub { basis: basis.flip(), s: s.clone() },
            Question::Inner { basis, s, inner } => {
                Question::Inner { basis: basis.flip(), s: s.clone(), inner: inner.clone() }
            }
            Question::Pair(c) => Question::Pair(PairCtx { wx: c.wx.flip(), ..c.clone() }),
            Question::Ms { ctx, slot } => {
                Question::Ms { ctx: ctx.as_ref().map(|c| PairCtx { wx: c.wx.flip(), ..c.clone() }), slot: *slot }
            }
            Question::Sum { basis, b, query } => Question::Sum { basis: basis.flip(), b: b.clone(), query: query.clone() },
            Question::Framed { set, inner } => Question::Framed { set: set.clone(), inner: Box::new(inner.flipped()) },
            q => q.clone(),
        }
    }

    pub fn framed(self, set: Option<&[usize]>) -> Question {
        match set {
            Some(s) => Question::Framed { set: s.to_vec(), inner: Box::new(self) },
            None => self,
        }
    }

    /// Strips an outer frame.
    pub fn unframe(&self) -> (Option<&[usize]>, &Question) {
        match self {
            Question::Framed { set, inner } => (Some(set.as_slice()), inner.as_ref()),
            q => (None, q),
        }
    }
}

// ---------------------------------------------------------------- answers

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Value(Elem),
    /// Tuple over Z_p (traced outcomes).
    Bits(Vec<u32>),
    Poly(MultiPoly),
    Tuple(Vec<Answer>),
    Null,
}

impl Answer {
    pub fn as_poly(&self) -> Option<&MultiPoly> {
        match self {
            Answer::Poly(p) => Some(p),
            _ => None,
        }
    }

    /// Field value of a scalar answer: a value or a 0-variate polynomial.
    pub fn scalar(&self, f: &Field) -> Option<Elem> {
        match self {
            Answer::Value(v) if *v < f.q() => Some(*v),
            Answer::Poly(p) if p.num_vars == 0 => Some(p.eval_unchecked(f, &[])),
            _ => None,
        }
    }

    pub fn bits(&self, len: usize, p: u32) -> Option<&[u32]> {
        match self {
            Answer::Bits(b) if b.len() == len && b.iter().all(|&x| x < p) => Some(b),
            _ => None,
        }
    }

    pub fn tuple(&self, len: usize) -> Option<&[Answer]> {
        match self {
            Answer::Tuple(t) if t.len() == len => Some(t),
            _ => None,
        }
    }

    /// Formatwise sum: field addition, Z_p addition on bits, componentwise on tuples.
    pub fn add(&self, f: &Field, o: &Answer) -> Result<Answer> {
        Ok(match (self, o) {
            (Answer::Value(a), Answer::Value(b)) => Answer::Value(f.add(*a, *b)),
            (Answer::Bits(a), Answer::Bits(b)) if a.len() == b.len() => {
                Answer::Bits(a.iter().zip(b).map(|(x, y)| (x + y) % f.p()).collect())
            }
            (Answer::Poly(a), Answer::Poly(b)) if a.num_vars == b.num_vars => Answer::Poly(a.add(f, b)),
            (Answer::Tuple(a), Answer::Tuple(b)) if a.len() == b.len() => {
                Answer::Tuple(a.iter().zip(b).map(|(x, y)| x.add(f, y)).collect::<Result<_>>()?)
            }
            (Answer::Null, Answer::Null) => Answer::Null,
            _ => return Err(Error::FormatMismatch(format!("cannot add {} and {}", self.kind(), o.kind()))),
        })
    }

    /// Scalar multiple; bit tuples only admit prime-subfield scalars.
    pub fn scale(&self, f: &Field, c: Elem) -> Result<Answer> {
        Ok(match self {
            Answer::Value(a) => Answer::Value(f.mul(*a, c)),
            Answer::Bits(a) => {
                if c >= f.p() {
                    return Err(Error::FormatMismatch(format!("bit tuple scaled by {c} outside GF({})", f.p())));
                }
                Answer::Bits(a.iter().map(|x| x * c % f.p()).collect())
            }
            Answer::Poly(p) => Answer::Poly(p.scale(f, c)),
            Answer::Tuple(t) => Answer::Tuple(t.iter().map(|x| x.scale(f, c)).collect::<Result<_>>()?),
            Answer::Null => Answer::Null,
        })
    }

    pub fn neg(&self, f: &Field) -> Result<Answer> {
        self.scale(f, f.neg(1))
    }

    pub fn zero_like(&self) -> Answer {
        match self {
            Answer::Value(_) => Answer::Value(0),
            Answer::Bits(b) => Answer::Bits(vec![0; b.len()]),
            Answer::Poly(p) => Answer::Poly(MultiPoly::zero(p.num_vars)),
            Answer::Tuple(t) => Answer::Tuple(t.iter().map(|x| x.zero_like()).collect()),
            Answer::Null => Answer::Null,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Answer::Value(_) => "value",
            Answer::Bits(_) => "bits",
            Answer::Poly(_) => "poly",
            Answer::Tuple(_) => "tuple",
            Answer::Null => "null",
        }
    }
}

/// sum_i coeffs[i] * pieces[i] in the answer format of the pieces.
pub fn linear_answer(f: &Field, pieces: &[Answer], coeffs: &[Elem]) -> Result<Answer> {
    let mut acc = pieces.first().map(|p| p.zero_like()).unwrap_or(Answer::Null);
    for (p, &c) in pieces.iter().zip(coeffs) {
        if c != 0 {
            acc = acc.add(f, &p.scale(f, c)?)?;
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------- games

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Acceptance probability given the answers (verifier coins folded in).
    pub accept: f64,
    /// Emitted value, for rounds that return one.
    pub value: Option<f64>,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        Verdict { accept: if b { 1.0 } else { 0.0 }, value: None }
    }

    pub fn reject() -> Self {
        Self::from_bool(false)
    }
}

pub type Decide = Arc<dyn Fn(&[&Answer]) -> Verdict + Send + Sync>;

#[derive(Clone)]
pub struct Round {
    pub weight: f64,
    pub branch: String,
    pub questions: Vec<Question>,
    pub decide: Decide,
}

impl std::fmt::Debug for Round {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Round").field("weight", &self.weight).field("branch", &self.branch).field("questions", &self.questions).finish()
    }
}

#[derive(Clone, Debug)]
pub struct Game {
    pub name: String,
    pub players: usize,
    pub rounds: Vec<Round>,
}

fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

impl Game {
    pub fn new(name: impl Into<String>, players: usize, rounds: Vec<Round>) -> Result<Self> {
        if rounds.iter().any(|r| !(r.weight > 0.0) || r.questions.len() != players) {
            return Err(Error::InvalidParam("round with non-positive weight or wrong arity".into()));
        }
        let total = neumaier(rounds.iter().map(|r| r.weight));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!("question weights sum to {total}")));
        }
        Ok(Self { name: name.into(), players, rounds })
    }

    /// Branch names in order of first appearance.
    pub fn branches(&self) -> Vec<String> {
        let mut out: Vec<String> = vec![];
        for r in &self.rounds {
            if !out.contains(&r.branch) {
                out.push(r.branch.clone());
            }
        }
        out
    }

    /// Same questions and weights with a replaced predicate.
    pub fn with_predicate(&self, decide: Decide) -> Game {
        let rounds = self.rounds.iter().map(|r| Round { decide: decide.clone(), ..r.clone() }).collect();
        Game { name: self.name.clone(), players: self.players, rounds }
    }
}

/// Concatenates weighted parts, scaling each part's weights and prefixing branches.
pub fn mix(parts: Vec<(f64, Vec<Round>)>) -> Vec<Round> {
    parts
        .into_iter()
        .flat_map(|(w, rounds)| rounds.into_iter().map(move |r| Round { weight: r.weight * w, ..r }))
        .collect()
}

pub fn rename_branch(rounds: Vec<Round>, name: &str) -> Vec<Round> {
    rounds.into_iter().map(|r| Round { branch: name.to_string(), ..r }).collect()
}

// ---------------------------------------------------------------- strategies

/// A player's measurement for one question: an orthonormal basis of the local
/// space (`None` = computational) with an answer per basis vector.
#[derive(Clone, Debug)]
pub struct LocalMeasurement {
    /// Identifies the physical basis; equal keys must mean equal bases.
    pub key: Option<String>,
    pub basis: Option<Arc<Mat>>,
    pub labels: Vec<Answer>,
    pub label_of: Vec<u32>,
}

impl LocalMeasurement {
    pub fn new(key: Option<String>, basis: Option<Mat>, per_vector: Vec<Answer>) -> Self {
        Self::with_basis(key, basis.map(Arc::new), per_vector)
    }

    pub fn with_basis(key: Option<String>, basis: Option<Arc<Mat>>, per_vector: Vec<Answer>) -> Self {
        let mut labels: Vec<Answer> = vec![];
        let mut index: HashMap<Answer, u32> = HashMap::new();
        let label_of = per_vector
            .into_iter()
            .map(|a| {
                *index.entry(a.clone()).or_insert_with(|| {
                    labels.push(a);
                    labels.len() as u32 - 1
                })
            })
            .collect();
        Self { key, basis, labels, label_of }
    }

    pub fn from_basis(key: Option<String>, m: BasisMeasurement<Answer>) -> Self {
        Self::new(key, m.basis, m.labels)
    }

    /// A fixed answer on a one-dimensional local space.
    pub fn constant(a: Answer) -> Self {
        Self::new(Some("const".into()), None, vec![a])
    }

    pub fn dim(&self) -> usize {
        self.label_of.len()
    }

    pub fn per_vector(&self) -> Vec<Answer> {
        self.label_of.iter().map(|&l| self.labels[l as usize].clone()).collect()
    }

    /// Classical post-processing of every outcome; the physical basis is unchanged.
    pub fn map_labels(&self, g: impl Fn(&Answer) -> Answer) -> Self {
        Self::with_basis(self.key.clone(), self.basis.clone(), self.per_vector().iter().map(g).collect())
    }
}

pub trait Resolver: Send + Sync {
    fn measure(&self, player: usize, q: &Question) -> Result<LocalMeasurement>;
}

/// Resolver from a closure.
pub struct FnResolver<F>(pub F);

impl<F: Fn(usize, &Question) -> Result<LocalMeasurement> + Send + Sync> Resolver for FnResolver<F> {
    fn measure(&self, player: usize, q: &Question) -> Result<LocalMeasurement> {
        (self.0)(player, q)
    }
}

#[derive(Clone)]
pub struct Strategy {
    pub state: Arc<StateVec>,
    /// Local dimension of each player, in site order.
    pub dims: Vec<usize>,
    pub resolver: Arc<dyn Resolver>,
}

impl Strategy {
    pub fn new(state: StateVec, dims: Vec<usize>, resolver: Arc<dyn Resolver>) -> Result<Self> {
        if dims.iter().product::<usize>() != state.dim() {
            return Err(Error::DimensionMismatch(format!("player dims {dims:?} vs state dimension {}", state.dim())));
        }
        Ok(Self { state: Arc::new(state), dims, resolver })
    }

    /// Deterministic classical strategy on a trivial state.
    pub fn deterministic(players: usize, answer: impl Fn(usize, &Question) -> Answer + Send + Sync + 'static) -> Self {
        let state = StateVec { q: 1, sites: 0, amps: vec![C64::new(1.0, 0.0)] };
        let r = FnResolver(move |p: usize, q: &Question| Ok(LocalMeasurement::constant(answer(p, q))));
        Self { state: Arc::new(state), dims: vec![1; players], resolver: Arc::new(r) }
    }

    /// Each player answers uniformly from a list of `dim` answers (repeats allowed),
    /// using private randomness modeled as a uniform superposition.
    pub fn uniform_random(
        players: usize,
        dim: usize,
        answers: impl Fn(usize, &Question) -> Vec<Answer> + Send + Sync + 'static,
    ) -> Self {
        let total = dim.pow(players as u32);
        let a = C64::new(1.0 / (total as f64).sqrt(), 0.0);
        let state = StateVec { q: dim, sites: players, amps: vec![a; total] };
        let r = FnResolver(move |p: usize, q: &Question| {
            let list = answers(p, q);
            if list.len() != dim {
                return Err(Error::DimensionMismatch(format!("{} answers for local dimension {dim}", list.len())));
            }
            Ok(LocalMeasurement::new(Some("computational".into()), None, list))
        });
        Self { state: Arc::new(state), dims: vec![dim; players], resolver: Arc::new(r) }
    }

    /// Products of the local dimensions left and right of each player.
    pub fn offsets(&self) -> (Vec<usize>, Vec<usize>) {
        let k = self.dims.len();
        let left = (0..k).map(|j| self.dims[..j].iter().product()).collect();
        let right = (0..k).map(|j| self.dims[j + 1..].iter().product()).collect();
        (left, right)
    }
}

/// Resolver wrapper that post-processes one player's answers on selected questions.
pub struct Relabeled {
    pub base: Arc<dyn Resolver>,
    pub player: usize,
    pub select: Box<dyn Fn(&Question) -> bool + Send + Sync>,
    pub map: Box<dyn Fn(&Answer) -> Answer + Send + Sync>,
}

impl Resolver for Relabeled {
    fn measure(&self, player: usize, q: &Question) -> Result<LocalMeasurement> {
        let m = self.base.measure(player, q)?;
        if player == self.player && (self.select)(q) {
            Ok(m.map_labels(|a| (self.map)(a)))
        } else {
            Ok(m)
        }
    }
}

// ---------------------------------------------------------------- engine

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub name: String,
    pub weight: f64,
    /// Acceptance probability conditioned on the branch.
    pub value: f64,
    /// Mean emitted value conditioned on the branch, when the branch emits values.
    pub emitted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub mode: Mode,
    pub value: f64,
    pub std_err: f64,
    pub trials: u64,
    pub seed: Option<u64>,
    pub branches: Vec<BranchReport>,
}

impl AcceptanceReport {
    pub fn branch(&self, name: &str) -> Option<&BranchReport> {
        self.branches.iter().find(|b| b.name == name)
    }
}

/// Joint outcome distribution of one round over label tuples, sorted by key.
#[derive(Clone, Debug, Default)]
pub struct OutcomeDist {
    pub radix: Vec<u32>,
    pub entries: Vec<(u128, f64)>,
}

impl OutcomeDist {
    pub fn decode(&self, mut key: u128) -> Vec<u32> {
        let mut out = vec![0; self.radix.len()];
        for j in (0..self.radix.len()).rev() {
            out[j] = (key % self.radix[j] as u128) as u32;
            key /= self.radix[j] as u128;
        }
        out
    }
}

type MeasTable = HashMap<(usize, Question), Arc<LocalMeasurement>>;

fn resolve_all(game: &Game, s: &Strategy, rounds: &[usize]) -> Result<MeasTable> {
    let mut seen: HashMap<(usize, &Question), ()> = HashMap::new();
    let mut todo = vec![];
    for &ri in rounds {
        for (j, q) in game.rounds[ri].questions.iter().enumerate() {
            if seen.insert((j, q), ()).is_none() {
                todo.push((j, q));
            }
        }
    }
    let resolved: Vec<Result<((usize, Question), Arc<LocalMeasurement>)>> = todo
        .par_iter()
        .map(|&(j, q)| {
            let m = s.resolver.measure(j, q)?;
            if m.dim() != s.dims[j] {
                return Err(Error::DimensionMismatch(format!(
                    "player {j} measurement of dimension {} on a local space of dimension {}",
                    m.dim(),
                    s.dims[j]
                )));
            }
            Ok(((j, q.clone()), Arc::new(m)))
        })
        .collect();
    resolved.into_iter().collect()
}

/// Nonzero joint basis probabilities for the measurement tuple `ms`.
fn joint_probs(s: &Strategy, ms: &[Arc<LocalMeasurement>]) -> Vec<(usize, f64)> {
    let (left, right) = s.offsets();
    let mut v = s.state.amps.clone();
    for (j, m) in ms.iter().enumerate() {
        if let Some(b) = &m.basis {
            v = apply_axis(&v, &b.adjoint(), left[j], s.dims[j], right[j]);
        }
    }
    v.iter().enumerate().map(|(i, a)| (i, a.norm_sqr())).filter(|&(_, p)| p > 1e-18).collect()
}

fn label_dist(s: &Strategy, ms: &[Arc<LocalMeasurement>], probs: &[(usize, f64)]) -> OutcomeDist {
    let radix: Vec<u32> = ms.iter().map(|m| m.labels.len() as u32).collect();
    let mut acc: HashMap<u128, f64> = HashMap::new();
    for &(idx, p) in probs {
        let mut rem = idx;
        let mut key: u128 = 0;
        let mut locals = vec![0usize; ms.len()];
        for j in (0..ms.len()).rev() {
            locals[j] = rem % s.dims[j];
            rem /= s.dims[j];
        }
        for (j, m) in ms.iter().enumerate() {
            key = key * radix[j] as u128 + m.label_of[locals[j]] as u128;
        }
        *acc.entry(key).or_insert(0.0) += p;
    }
    let mut entries: Vec<(u128, f64)> = acc.into_iter().collect();
    entries.sort_by_key(|e| e.0);
    OutcomeDist { radix, entries }
}

fn physical_ids(ms: &[Arc<LocalMeasurement>], round: usize) -> Vec<String> {
    ms.iter()
        .enumerate()
        .map(|(j, m)| match &m.key {
            Some(k) => k.clone(),
            None => format!("#{round}/{j}"),
        })
        .collect()
}

/// Label distributions for the given rounds, grouped by physical basis tuple.
fn round_dists(game: &Game, s: &Strategy, rounds: &[usize], table: &MeasTable) -> Vec<(usize, Vec<Arc<LocalMeasurement>>, OutcomeDist)> {
    let mut groups: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
    let mut order: Vec<Vec<String>> = vec![];
    for &ri in rounds {
        let ms: Vec<_> = game.rounds[ri].questions.iter().enumerate().map(|(j, q)| table[&(j, q.clone())].clone()).collect();
        let ids = physical_ids(&ms, ri);
        groups.entry(ids.clone()).or_insert_with(|| {
            order.push(ids);
            vec![]
        });
    }
    for &ri in rounds {
        let ms: Vec<_> = game.rounds[ri].questions.iter().enumerate().map(|(j, q)| table[&(j, q.clone())].clone()).collect();
        groups.get_mut(&physical_ids(&ms, ri)).unwrap().push(ri);
    }
    let mut out: Vec<_> = order
        .par_iter()
        .flat_map_iter(|ids| {
            let members = &groups[ids];
            let first: Vec<_> = game.rounds[members[0]].questions.iter().enumerate().map(|(j, q)| table[&(j, q.clone())].clone()).collect();
            let probs = joint_probs(s, &first);
            members
                .iter()
                .map(|&ri| {
                    let ms: Vec<_> = game.rounds[ri].questions.iter().enumerate().map(|(j, q)| table[&(j, q.clone())].clone()).collect();
                    let d = label_dist(s, &ms, &probs);
                    (ri, ms, d)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by_key(|e| e.0);
    out
}

/// Outcome distribution of a single question tuple (used by wire provers).
pub fn question_dist(s: &Strategy, questions: &[Question]) -> Result<(Vec<Arc<LocalMeasurement>>, OutcomeDist)> {
    let ms: Vec<Arc<LocalMeasurement>> = questions
        .iter()
        .enumerate()
        .map(|(j, q)| s.resolver.measure(j, q).map(Arc::new))
        .collect::<Result<_>>()?;
    if ms.iter().zip(&s.dims).any(|(m, &d)| m.dim() != d) {
        return Err(Error::DimensionMismatch("measurement dimension differs from the local space".into()));
    }
    let probs = joint_probs(s, &ms);
    let d = label_dist(s, &ms, &probs);
    Ok((ms, d))
}

struct RoundTotals {
    accept: f64,
    value_sum: f64,
    value_mass: f64,
}

fn eval_round(round: &Round, ms: &[Arc<LocalMeasurement>], d: &OutcomeDist) -> RoundTotals {
    let mut t = RoundTotals { accept: 0.0, value_sum: 0.0, value_mass: 0.0 };
    for &(key, p) in &d.entries {
        let ids = d.decode(key);
        let answers: Vec<&Answer> = ids.iter().zip(ms).map(|(&i, m)| &m.labels[i as usize]).collect();
        let v = (round.decide)(&answers);
        t.accept += p * v.accept;
        if let Some(x) = v.value {
            t.value_sum += p * x;
            t.value_mass += p;
        }
    }
    t
}

pub fn exact_value(game: &Game, s: &Strategy) -> Result<AcceptanceReport> {
    exact_value_with_budget(game, s, DEFAULT_BUDGET)
}

/// Sum over questions and outcomes of weight x Born probability x predicate.
pub fn exact_value_with_budget(game: &Game, s: &Strategy, budget: u64) -> Result<AcceptanceReport> {
    if s.dims.len() != game.players {
        return Err(Error::DimensionMismatch(format!("{} players vs {} local spaces", game.players, s.dims.len())));
    }
    let estimate = (game.rounds.len() as u64).saturating_mul(s.state.dim() as u64);
    if estimate > budget {
        return Err(Error::BudgetExceeded { estimate, budget });
    }
    let all: Vec<usize> = (0..game.rounds.len()).collect();
    let table = resolve_all(game, s, &all)?;
    let dists = round_dists(game, s, &all, &table);
    let totals: Vec<(usize, RoundTotals)> =
        dists.par_iter().map(|(ri, ms, d)| (*ri, eval_round(&game.rounds[*ri], ms, d))).collect();
    let names = game.branches();
    let mut acc: HashMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = HashMap::new();
    for (ri, t) in &totals {
        let r = &game.rounds[*ri];
        let e = acc.entry(r.branch.as_str()).or_default();
        e.0.push(r.weight);
        e.1.push(r.weight * t.accept);
        e.2.push(r.weight * t.value_sum);
        e.3.push(r.weight * t.value_mass);
    }
    let mut branches = vec![];
    let mut value = vec![];
    for n in &names {
        let (w, a, vs, vm) = &acc[n.as_str()];
        let (w, a, vs, vm) = (neumaier(w.iter().copied()), neumaier(a.iter().copied()), neumaier(vs.iter().copied()), neumaier(vm.iter().copied()));
        value.push(a);
        branches.push(BranchReport { name: n.clone(), weight: w, value: a / w, emitted: (vm > 0.0).then(|| vs / vm) });
    }
    Ok(AcceptanceReport { mode: Mode::Exact, value: neumaier(value.into_iter()).clamp(0.0, 1.0), std_err: 0.0, trials: 0, seed: None, branches })
}

// ---------------------------------------------------------------- Monte Carlo

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Named per-component RNG stream for one trial.
pub fn stream_rng(seed: u64, name: &str, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    rng.set_stream(trial);
    rng
}

/// Trials per branch: proportional allocation with largest remainders, or a
/// single stratum when there are fewer trials than branches.
pub fn allocate(game: &Game, trials: u64) -> Vec<(String, u64)> {
    let names = game.branches();
    if (trials as usize) < names.len() {
        return vec![(String::new(), trials)];
    }
    let w: Vec<f64> = names.iter().map(|n| game.rounds.iter().filter(|r| &r.branch == n).map(|r| r.weight).sum()).collect();
    let mut alloc: Vec<u64> = w.iter().map(|x| ((x * trials as f64).floor() as u64).max(1)).collect();
    let mut rem: Vec<(usize, f64)> = w.iter().enumerate().map(|(i, x)| (i, x * trials as f64 - (x * trials as f64).floor())).collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut used: u64 = alloc.iter().sum();
    let mut k = 0;
    while used < trials {
        alloc[rem[k % rem.len()].0] += 1;
        used += 1;
        k += 1;
    }
    while used > trials {
        let i = (0..alloc.len()).max_by_key(|&i| alloc[i]).unwrap();
        alloc[i] -= 1;
        used -= 1;
    }
    names.into_iter().zip(alloc).collect()
}

/// Per-stratum cumulative round weights, so drawing a round is a binary search.
pub struct RoundSampler {
    strata: Vec<(u64, Vec<usize>, Vec<f64>)>,
}

impl RoundSampler {
    pub fn new(game: &Game, alloc: &[(String, u64)]) -> Self {
        let mut start = 0;
        let strata = alloc
            .iter()
            .map(|(name, n)| {
                let members: Vec<usize> = (0..game.rounds.len()).filter(|&i| name.is_empty() || &game.rounds[i].branch == name).collect();
                let mut acc = 0.0;
                let cum = members.iter().map(|&i| {
                    acc += game.rounds[i].weight;
                    acc
                });
                let cum = cum.collect();
                start += n;
                (start, members, cum)
            })
            .collect();
        Self { strata }
    }

    /// Round for trial `i` (question stream).
    pub fn round(&self, seed: u64, trial: u64) -> usize {
        let (_, members, cum) = self.strata.iter().find(|s| trial < s.0).or(self.strata.last()).expect("nonempty allocation");
        let total = *cum.last().unwrap();
        let x = stream_rng(seed, "questions", trial).gen::<f64>() * total;
        members[cum.partition_point(|&c| c <= x).min(members.len() - 1)]
    }
}

/// Round sampled for trial `i` under the allocation (question stream).
pub fn sample_round(game: &Game, alloc: &[(String, u64)], seed: u64, trial: u64) -> usize {
    RoundSampler::new(game, alloc).round(seed, trial)
}

/// Samples a label tuple from a distribution (measurement stream).
pub fn sample_outcome(d: &OutcomeDist, seed: u64, trial: u64) -> Vec<u32> {
    let mut rng = stream_rng(seed, "measurement", trial);
    let total: f64 = d.entries.iter().map(|e| e.1).sum();
    let x = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for &(k, p) in &d.entries {
        acc += p;
        if x < acc {
            return d.decode(k);
        }
    }
    d.decode(d.entries.last().map(|e| e.0).unwrap_or(0))
}

/// Bernoulli draw of the verdict (verdict stream).
pub fn sample_accept(v: &Verdict, seed: u64, trial: u64) -> bool {
    let mut rng = stream_rng(seed, "verdict", trial);
    rng.gen::<f64>() < v.accept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub round: usize,
    pub branch: String,
    pub questions: Vec<Question>,
    pub answers: Vec<Answer>,
    pub accept: bool,
    pub value: Option<f64>,
}

/// Runs `trials` sampled rounds; returns the report and the per-trial records.
pub fn mc_run(game: &Game, s: &Strategy, trials: u64, seed: u64) -> Result<(AcceptanceReport, Vec<TrialRecord>)> {
    if trials == 0 {
        return Err(Error::InvalidParam("trials must be positive".into()));
    }
    let alloc = allocate(game, trials);
    let sampler = RoundSampler::new(game, &alloc);
    let picks: Vec<usize> = (0..trials).into_par_iter().map(|i| sampler.round(seed, i)).collect();
    let mut distinct = picks.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let table = resolve_all(game, s, &distinct)?;
    let dists: HashMap<usize, (Vec<Arc<LocalMeasurement>>, OutcomeDist)> =
        round_dists(game, s, &distinct, &table).into_iter().map(|(ri, ms, d)| (ri, (ms, d))).collect();
    let records: Vec<TrialRecord> = picks
        .par_iter()
        .enumerate()
        .map(|(i, &ri)| {
            let round = &game.rounds[ri];
            let (ms, d) = &dists[&ri];
            let ids = sample_outcome(d, seed, i as u64);
            let answers: Vec<Answer> = ids.iter().zip(ms).map(|(&k, m)| m.labels[k as usize].clone()).collect();
            let refs: Vec<&Answer> = answers.iter().collect();
            let v = (round.decide)(&refs);
            let accept = sample_accept(&v, seed, i as u64);
            TrialRecord { trial: i as u64, round: ri, branch: round.branch.clone(), questions: round.questions.clone(), answers, accept, value: v.value }
        })
        .collect();
    Ok((mc_report(game, &alloc, &records, Some(seed)), records))
}

pub fn mc_value(game: &Game, s: &Strategy, trials: u64, seed: u64) -> Result<AcceptanceReport> {
    Ok(mc_run(game, s, trials, seed)?.0)
}

/// Stratified estimate from trial records.
pub fn mc_report(game: &Game, alloc: &[(String, u64)], records: &[TrialRecord], seed: Option<u64>) -> AcceptanceReport {
    let names = game.branches();
    let weight = |n: &str| -> f64 { game.rounds.iter().filter(|r| n.is_empty() || r.branch == n).map(|r| r.weight).sum() };
    // Accumulate the rejection mass so a run with no rejections reports exactly 1.
    let mut reject = 0.0;
    let mut var = 0.0;
    let mut start = 0usize;
    for (name, n) in alloc {
        let recs = &records[start..start + *n as usize];
        start += *n as usize;
        let m = recs.iter().filter(|r| r.accept).count() as f64 / recs.len().max(1) as f64;
        let w = weight(name);
        reject += w * (1.0 - m);
        if recs.len() > 1 {
            var += w * w * m * (1.0 - m) / (recs.len() as f64 - 1.0);
        }
    }
    let branches = names
        .iter()
        .map(|n| {
            let recs: Vec<&TrialRecord> = records.iter().filter(|r| &r.branch == n).collect();
            let cnt = recs.len().max(1) as f64;
            let vals: Vec<f64> = recs.iter().filter_map(|r| r.value).collect();
            BranchReport {
                name: n.clone(),
                weight: weight(n),
                value: recs.iter().filter(|r| r.accept).count() as f64 / cnt,
                emitted: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            }
        })
        .collect();
    let value = (1.0 - reject).clamp(0.0, 1.0);
    AcceptanceReport { mode: Mode::MonteCarlo, value, std_err: var.sqrt(), trials: records.len() as u64, seed, branches }
}

// ---------------------------------------------------------------- COM and Magic Square

/// Commutation test over Z_s: questions 1 and 2 ask for one outcome, question 3 for both.
pub fn com_game(s: u32) -> Result<Game> {
    if s < 2 {
        return Err(Error::InvalidParam(format!("COM needs s >= 2, got {s}")));
    }
    let mut rounds = vec![];
    for swap in [false, true] {
        for qi in [1u8, 2] {
            let qs = if swap { vec![Question::Com(3), Question::Com(qi)] } else { vec![Question::Com(qi), Question::Com(3)] };
            let decide: Decide = Arc::new(move |a: &[&Answer]| {
                let (single, pair) = if swap { (a[1], a[0]) } else { (a[0], a[1]) };
                let ok = match (single.bits(1, s), pair.bits(2, s)) {
                    (Some(x), Some(b)) => x[0] == b[qi as usize - 1],
                    _ => false,
                };
                Verdict::from_bool(ok)
            });
            rounds.push(Round { weight: 0.25, branch: "com".into(), questions: qs, decide });
        }
    }
    Game::new("com", 2, rounds)
}

/// Cells of line l.
pub fn ms_line_cells(l: u8) -> [(u8, u8); 3] {
    if l < 3 {
        [(l, 0), (l, 1), (l, 2)]
    } else {
        [(0, l - 3), (1, l - 3), (2, l - 3)]
    }
}

/// Completes a two-bit line answer: rows multiply to +I, columns to -I.
pub fn ms_line_bits(l: u8, b: &[u32]) -> [u32; 3] {
    let par = if l < 3 { 0 } else { 1 };
    [b[0], b[1], (b[0] + b[1] + par) % 2]
}

/// Line-versus-cell rounds: (line index, position of the cell in the line, line player first?).
fn ms_layout() -> Vec<(u8, usize, bool)> {
    let mut out = vec![];
    for line_first in [true, false] {
        for l in 0..6u8 {
            for pos in 0..3 {
                out.push((l, pos, line_first));
            }
        }
    }
    out
}

/// Mermin-Peres Magic Square as a line-versus-cell game; cell (0,0) is the
/// question labeled X and cell (1,1) the question labeled Z.
pub fn magic_square_game() -> Game {
    let rounds = ms_layout()
        .into_iter()
        .map(|(l, pos, line_first)| {
            let (r, c) = ms_line_cells(l)[pos];
            let lq = Question::Ms { ctx: None, slot: MsSlot::Line(l) };
            let cq = Question::Ms { ctx: None, slot: MsSlot::Cell(r, c) };
            let qs = if line_first { vec![lq, cq] } else { vec![cq, lq] };
            let decide: Decide = Arc::new(move |a: &[&Answer]| {
                let (la, ca) = if line_first { (a[0], a[1]) } else { (a[1], a[0]) };
                let ok = match (la.bits(2, 2), ca.bits(1, 2)) {
                    (Some(lb), Some(cb)) => ms_line_bits(l, lb)[pos] == cb[0],
                    _ => false,
                };
                Verdict::from_bool(ok)
            });
            Round { weight: 1.0 / 36.0, branch: "ms".into(), questions: qs, decide }
        })
        .collect();
    Game::new("magic-square", 2, rounds).expect("weights sum to one")
}

/// Best deterministic classical value of the Magic Square game, by exhaustive
/// search over all line and cell assignments.
pub fn ms_classical_max() -> f64 {
    // Orientation halves use disjoint parts of the two strategies, so the
    // optimum is the best single (line table, cell table) pair.
    let mut best = 0u32;
    for lines in 0u32..(1 << 12) {
        let lb: Vec<[u32; 3]> = (0..6u8).map(|l| ms_line_bits(l, &[(lines >> (2 * l)) & 1, (lines >> (2 * l + 1)) & 1])).collect();
        for cells in 0u32..(1 << 9) {
            let mut hits = 0;
            for l in 0..6u8 {
                for (pos, &(r, c)) in ms_line_cells(l).iter().enumerate() {
                    if lb[l as usize][pos] == (cells >> (3 * r + c)) & 1 {
                        hits += 1;
                    }
                }
            }
            best = best.max(hits);
        }
    }
    best as f64 / 18.0
}

/// Cell observables from a pair of anticommuting "logical" observables and an
/// ancilla pair: rows XI IX XX / IZ ZI ZZ / -XZ -ZX YY.
pub fn ms_cell_ops(xl: &Mat, zl: &Mat, xa: &Mat, za: &Mat) -> Vec<Vec<Mat>> {
    let (il, ia) = (identity(xl.nrows()), identity(xa.nrows()));
    let m1 = C64::new(-1.0, 0.0);
    vec![
        vec![kron(xl, &ia), kron(&il, xa), kron(xl, xa)],
        vec![kron(&il, za), kron(zl, &ia), kron(zl, za)],
        vec![kron(xl, za) * m1, kron(zl, xa) * m1, kron(&(xl * zl), &(xa * za)) * m1],
    ]
}

fn ms_measurement(ops: &[Vec<Mat>], slot: MsSlot) -> Result<BasisMeasurement<Answer>> {
    match slot {
        MsSlot::Cell(r, c) => {
            let o = GenObservable::new(2, ops[r as usize][c as usize].clone())?;
            let projs = o.projectors();
            ProjMeasurement { elements: projs.into_iter().enumerate().map(|(e, p)| (Answer::Bits(vec![e as u32]), p)).collect() }
                .to_basis()
        }
        MsSlot::Line(l) => {
            let cells = ms_line_cells(l);
            let obs = cells[..2]
                .iter()
                .map(|&(r, c)| GenObservable::new(2, ops[r as usize][c as usize].clone()))
                .collect::<Result<Vec<_>>>()?;
            joint_measurement(&obs)
        }
    }
}

/// Joint eigenbasis of commuting observables, labeled by the tuple of exponents.
pub fn joint_measurement(obs: &[GenObservable]) -> Result<BasisMeasurement<Answer>> {
    let elems = crate::qsim::joint_refine(obs).into_iter().map(|(a, m)| (Answer::Bits(a), m)).collect();
    ProjMeasurement { elements: elems }.to_basis()
}

/// Canonical Magic Square strategy on two EPR pairs per player.
pub fn ms_strategy() -> Result<Strategy> {
    let f = Field::canonical(2, 1)?;
    let (x, z) = (tau(&f, Basis::X, 1), tau(&f, Basis::Z, 1));
    let ops = Arc::new(ms_cell_ops(&x, &z, &x, &z));
    let state = epr_state(&f, 2)?;
    let r = FnResolver(move |_p: usize, q: &Question| match q {
        Question::Ms { ctx: None, slot } => Ok(LocalMeasurement::from_basis(Some(format!("{slot:?}")), ms_measurement(&ops, *slot)?)),
        _ => Err(Error::InvalidParam(format!("unexpected question {q:?}"))),
    });
    Strategy::new(state, vec![4, 4], Arc::new(r))
}

/// COM strategy on a maximally entangled state: player A measures M and N,
/// player B their transposes.
pub fn com_strategy(s: u32, m: &Mat, n: &Mat) -> Result<Strategy> {
    let d = m.nrows();
    let om = GenObservable::new(s, m.clone())?;
    let on = GenObservable::new(s, n.clone())?;
    if ((m * n) - (n * m)).norm() > 1e-9 {
        return Err(Error::InvalidParam("observables do not commute".into()));
    }
    let tr = |o: &GenObservable| GenObservable { p: s, op: o.op.transpose() };
    let sides = [vec![om.clone(), on.clone()], vec![tr(&om), tr(&on)]];
    let mut tables: Vec<Vec<LocalMeasurement>> = vec![];
    for (pl, obs) in sides.iter().enumerate() {
        let mut t = vec![];
        for (qi, o) in obs.iter().enumerate() {
            let pm = ProjMeasurement {
                elements: o.projectors().into_iter().enumerate().map(|(e, p)| (Answer::Bits(vec![e as u32]), p)).collect(),
            };
            t.push(LocalMeasurement::from_basis(Some(format!("com{pl}:{qi}")), pm.to_basis()?));
        }
        t.push(LocalMeasurement::from_basis(Some(format!("com{pl}:joint")), joint_measurement(obs)?));
        tables.push(t);
    }
    let mut amps = vec![C64::new(0.0, 0.0); d * d];
    for i in 0..d {
        amps[i * d + i] = C64::new(1.0 / (d as f64).sqrt(), 0.0);
    }
    let state = StateVec { q: d, sites: 2, amps };
    let r = FnResolver(move |p: usize, q: &Question| match q {
        Question::Com(i @ 1..=3) => Ok(tables[p][*i as usize - 1].clone()),
        _ => Err(Error::InvalidParam(format!("unexpected question {q:?}"))),
    });
    Strategy::new(state, vec![d, d], Arc::new(r))
}

// ---------------------------------------------------------------- low-degree tests

/// Inner encoding for the composed test: a bivariate answer polynomial's
/// coefficient vector, multilinearly extended over GF(q)^{m'}.
#[derive(Clone, Debug)]
pub struct InnerCode {
    pub monomials: Vec<Vec<u32>>,
    pub inj: CoordInjection,
}

impl InnerCode {
    pub fn new(f: &Field, d: u32) -> Result<Self> {
        let mut monomials = vec![];
        for tot in 0..=d {
            for i in (0..=tot).rev() {
                monomials.push(vec![i, tot - i]);
            }
        }
        let n = monomials.len();
        let m = (usize::BITS - (n - 1).leading_zeros()) as usize;
        Ok(Self { inj: CoordInjection::new(n, 2, m.max(1), f.q())?, monomials })
    }

    pub fn m(&self) -> usize {
        self.inj.m
    }

    pub fn degree(&self) -> u32 {
        self.inj.m as u32
    }

    pub fn coeffs(&self, r: &MultiPoly) -> Result<Vec<Elem>> {
        if r.num_vars != 2 {
            return Err(Error::DimensionMismatch(format!("inner encoding expects a bivariate polynomial, got {} variables", r.num_vars)));
        }
        let mut c = vec![0; self.monomials.len()];
        for (e, &v) in &r.terms {
            let i = self.monomials.iter().position(|m| m == e).ok_or_else(|| Error::InvalidParam("degree exceeds the inner code".into()))?;
            c[i] = v;
        }
        Ok(c)
    }

    pub fn encode(&self, f: &Field, r: &MultiPoly) -> Result<MultiPoly> {
        self.inj.encode(f, &self.coeffs(r)?)
    }
}

/// Parameters of the (classical or quantum) low-degree test.
#[derive(Clone, Debug)]
pub struct LowDeg {
    pub f: FieldRef,
    pub m: usize,
    pub d: u32,
    pub level: u8,
    pub inner: Option<InnerCode>,
}

impl LowDeg {
    pub fn new(f: FieldRef, m: usize, d: u32, level: u8) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParam(format!("low-degree test needs m >= 2, got {m}")));
        }
        let inner = match level {
            1 => None,
            2 => Some(InnerCode::new(&f, d)?),
            _ => return Err(Error::InvalidParam(format!("level must be 1 or 2, got {level}"))),
        };
        Ok(Self { f, m, d, level, inner })
    }
}

/// A two-question check reused by the two-player test and by code-check routing.
#[derive(Clone)]
pub struct PairTest {
    pub weight: f64,
    pub branch: String,
    pub first: Question,
    pub second: Question,
    /// Decision on (A, A') with A' already in the first player's convention.
    pub decide: Arc<dyn Fn(&Answer, &Answer) -> Verdict + Send + Sync>,
}

pub fn plane_point_ok(f: &Field, d: u32, plane: &Answer, lam: &[Elem], point: &Answer) -> bool {
    match (plane.as_poly(), point.scalar(f)) {
        (Some(r), Some(a)) => r.num_vars == lam.len() && r.total_degree() <= d && r.eval_unchecked(f, lam) == a,
        _ => false,
    }
}

fn plane_point_test(f: &FieldRef, d: u32, weight: f64, plane_q: Question, point_q: Question, lam: Vec<Elem>, plane_first: bool) -> PairTest {
    let fr = f.clone();
    let (first, second) = if plane_first { (plane_q, point_q) } else { (point_q, plane_q) };
    PairTest {
        weight,
        branch: "a".into(),
        first,
        second,
        decide: Arc::new(move |a, b| {
            let (pl, pt) = if plane_first { (a, b) } else { (b, a) };
            Verdict::from_bool(plane_point_ok(&fr, d, pl, &lam, pt))
        }),
    }
}

/// Plane-versus-point checks in basis `w` (weights sum to 1). At level 2 half
/// the weight goes to the inner test on encoded plane answers.
pub fn lowdeg_part_a(ld: &LowDeg, w: Basis) -> Vec<PairTest> {
    let f = &ld.f;
    let q = f.q();
    let planes = AffineSubspace::all_planes(f, ld.m);
    let lams: Vec<Vec<Elem>> = (0..q * q).map(|i| vec![i % q, i / q]).collect();
    let outer_w = if ld.level == 2 { 0.5 } else { 1.0 };
    let mut out = vec![];
    let unit = outer_w / (2.0 * planes.len() as f64 * lams.len() as f64);
    for s in &planes {
        for lam in &lams {
            let pt = s.at(f, lam);
            for plane_first in [true, false] {
                out.push(plane_point_test(
                    f,
                    ld.d,
                    unit,
                    Question::Sub { basis: w, s: s.clone() },
                    Question::point(w, f, pt.clone()),
                    lam.clone(),
                    plane_first,
                ));
            }
        }
    }
    if let Some(ic) = &ld.inner {
        let inner_planes = AffineSubspace::all_planes(f, ic.m());
        let unit = 0.5 / (2.0 * planes.len() as f64 * inner_planes.len() as f64 * lams.len() as f64);
        for s in &planes {
            for s2 in &inner_planes {
                for lam in &lams {
                    let y = s2.at(f, lam);
                    for plane_first in [true, false] {
                        out.push(plane_point_test(
                            f,
                            ic.degree(),
                            unit,
                            Question::Inner { basis: w, s: s.clone(), inner: s2.clone() },
                            Question::Inner { basis: w, s: s.clone(), inner: AffineSubspace::point(f, y.clone()) },
                            lam.clone(),
                            plane_first,
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Traced point answer tr(c * r).
fn traced(f: &Field, ans: &Answer, c: Elem) -> Option<u32> {
    ans.scalar(f).map(|r| f.trace(f.mul(c, r)))
}

#[derive(Clone, Copy)]
enum CellRead {
    /// Point answer traced against the coefficient, then multiplied in Z_p.
    Point(Elem, u32),
    Bit,
}

fn read_cell(f: &Field, ans: &Answer, how: CellRead) -> Option<u32> {
    match how {
        CellRead::Point(c, mult) => traced(f, ans, c).map(|v| v * mult % f.p()),
        CellRead::Bit => ans.bits(1, f.p()).map(|b| b[0]),
    }
}

/// Commutation and Magic Square embeddings over all (x, z, u, u'); weights sum to 1.
pub fn lowdeg_part_b(ld: &LowDeg, inj: &CoordInjection) -> Result<Vec<PairTest>> {
    let f = &ld.f;
    let q = f.q() as usize;
    let p = f.p();
    let m = ld.m;
    let pts: Vec<Vec<Elem>> = (0..q.pow(m as u32)).map(|i| f.vec_from_index(i, m)).collect();
    let per = 1.0 / (pts.len() * pts.len() * q * q) as f64;
    let mut out = vec![];
    for x in &pts {
        let xp = inj.expand(f, x)?;
        for z in &pts {
            let zp = inj.expand(f, z)?;
            for u in 0..q as Elem {
                for u2 in 0..q as Elem {
                    let a = f.trace(f.dot(&f.scale_vec(u, &xp), &f.scale_vec(u2, &zp)));
                    let ctx = PairCtx { x: x.clone(), z: z.clone(), u, u2, wx: Basis::X };
                    let xq = Question::point(Basis::X, f, x.clone());
                    let zq = Question::point(Basis::Z, f, z.clone());
                    if a == 0 {
                        for (single, qi, c) in [(xq.clone(), 0usize, u), (zq.clone(), 1usize, u2)] {
                            for swap in [false, true] {
                                let fr = f.clone();
                                let decide = Arc::new(move |a0: &Answer, a1: &Answer| {
                                    let (sa, pa) = if swap { (a1, a0) } else { (a0, a1) };
                                    let ok = match (traced(&fr, sa, c), pa.bits(2, fr.p())) {
                                        (Some(v), Some(b)) => v == b[qi],
                                        _ => false,
                                    };
                                    Verdict::from_bool(ok)
                                });
                                let (first, second) =
                                    if swap { (Question::Pair(ctx.clone()), single.clone()) } else { (single.clone(), Question::Pair(ctx.clone())) };
                                out.push(PairTest { weight: per * 0.25, branch: "b-com".into(), first, second, decide });
                            }
                        }
                    } else {
                        let ainv = (1..p).find(|k| k * a % p == 1).expect("Z_p is a field");
                        for (l, pos, line_first) in ms_layout() {
                            let (r, c) = ms_line_cells(l)[pos];
                            let (cq, how) = match (r, c) {
                                (0, 0) => (xq.clone(), CellRead::Point(u, 1)),
                                (1, 1) => (zq.clone(), CellRead::Point(u2, ainv)),
                                _ => (Question::Ms { ctx: Some(ctx.clone()), slot: MsSlot::Cell(r, c) }, CellRead::Bit),
                            };
                            let lq = Question::Ms { ctx: Some(ctx.clone()), slot: MsSlot::Line(l) };
                            let fr = f.clone();
                            let decide = Arc::new(move |a0: &Answer, a1: &Answer| {
                                let (la, ca) = if line_first { (a0, a1) } else { (a1, a0) };
                                let ok = match (la.bits(2, fr.p()), read_cell(&fr, ca, how)) {
                                    (Some(lb), Some(cb)) => ms_line_bits(l, lb)[pos] == cb,
                                    _ => false,
                                };
                                Verdict::from_bool(ok)
                            });
                            let (first, second) = if line_first { (lq, cq) } else { (cq, lq) };
                            out.push(PairTest { weight: per / 36.0, branch: "b-ms".into(), first, second, decide });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// All checks of the quantum low-degree test: part (a) over W in {X, Z}, part (b).
pub fn qlowdeg_tests(ld: &LowDeg, inj: &CoordInjection) -> Result<Vec<PairTest>> {
    if ld.f.p() != 2 {
        return Err(Error::UnsupportedPrime(ld.f.p()));
    }
    if inj.m != ld.m {
        return Err(Error::InvalidParam(format!("injection has m = {}, test has m = {}", inj.m, ld.m)));
    }
    let mut out = vec![];
    for w in [Basis::X, Basis::Z] {
        out.extend(lowdeg_part_a(ld, w).into_iter().map(|t| PairTest { weight: t.weight * 0.25, ..t }));
    }
    out.extend(lowdeg_part_b(ld, inj)?.into_iter().map(|t| PairTest { weight: t.weight * 0.5, ..t }));
    Ok(out)
}

/// Two-player game from pair checks; for X-basis questions the second answer is negated.
pub fn pair_game(name: &str, f: &FieldRef, tests: Vec<PairTest>) -> Result<Game> {
    let rounds = tests
        .into_iter()
        .map(|t| {
            let neg = matches!(t.second.unframe().1, Question::Sub { basis: Basis::X, .. } | Question::Inner { basis: Basis::X, .. });
            let fr = f.clone();
            let dec = t.decide.clone();
            let decide: Decide = Arc::new(move |a: &[&Answer]| {
                if neg {
                    match a[1].neg(&fr) {
                        Ok(b) => dec(a[0], &b),
                        Err(_) => Verdict::reject(),
                    }
                } else {
                    dec(a[0], a[1])
                }
            });
            Round { weight: t.weight, branch: t.branch, questions: vec![t.first, t.second], decide }
        })
        .collect();
    Game::new(name, 2, rounds)
}

pub fn qlowdeg_game(ld: &LowDeg, inj: &CoordInjection) -> Result<Game> {
    pair_game(&format!("q-lowdeg{}", ld.level), &ld.f, qlowdeg_tests(ld, inj)?)
}

/// Classical low-degree test (Z-labeled questions, symmetrized plane/point pairs).
pub fn clowdeg_game(f: &FieldRef, m: usize, d: u32, level: u8) -> Result<Game> {
    let ld = LowDeg::new(f.clone(), m, d, level)?;
    pair_game(&format!("c-lowdeg{level}"), f, lowdeg_part_a(&ld, Basis::Z))
}

// ---------------------------------------------------------------- honest Pauli prover

/// Dense tensor product of tau_{patterns[i]}(v[i]).
pub fn mixed_word(f: &Field, patterns: &[Basis], v: &[Elem]) -> Result<Mat> {
    let dim = (f.q() as usize).pow(v.len() as u32);
    if dim > MATRIX_CAP {
        return Err(Error::DimensionCap(format!("dense word of dimension {dim}")));
    }
    Ok(patterns.iter().zip(v).fold(identity(1), |acc, (&w, &a)| kron(&acc, &tau(f, w, a))))
}

fn pattern_key(p: &[Basis]) -> String {
    p.iter().map(|b| if *b == Basis::X { 'X' } else { 'Z' }).collect()
}

/// The low-degree Pauli prover: each player holds `n` data qudits followed by
/// one ancilla qudit, and answers every question from a measurement of the data
/// register in a product basis (or, for part (b), of Pauli words).
pub struct PauliProver {
    pub ld: LowDeg,
    pub inj: CoordInjection,
    bases: Mutex<HashMap<String, Option<Arc<Mat>>>>,
    pieces: Mutex<HashMap<AffineSubspace, Arc<Vec<MultiPoly>>>>,
    /// Part-(b) measurements by physical key; many contexts share the same words.
    words: Mutex<HashMap<String, LocalMeasurement>>,
}

impl PauliProver {
    pub fn new(ld: LowDeg, inj: CoordInjection) -> Result<Self> {
        if ld.f.p() != 2 {
            return Err(Error::UnsupportedPrime(ld.f.p()));
        }
        let dim = (ld.f.q() as usize).pow(inj.n as u32 + 1);
        if dim > MATRIX_CAP {
            return Err(Error::DimensionCap(format!("local dimension {dim} exceeds {MATRIX_CAP}")));
        }
        Ok(Self { ld, inj, bases: Mutex::new(HashMap::new()), pieces: Mutex::new(HashMap::new()), words: Mutex::new(HashMap::new()) })
    }

    pub fn f(&self) -> &FieldRef {
        &self.ld.f
    }

    pub fn n(&self) -> usize {
        self.inj.n
    }

    pub fn local_dim(&self) -> usize {
        (self.f().q() as usize).pow(self.n() as u32 + 1)
    }

    /// Per-qudit bases: `w` on the frame set (all qudits when unframed), the other basis elsewhere.
    pub fn patterns(&self, frame: Option<&[usize]>, w: Basis) -> Vec<Basis> {
        (0..self.n()).map(|i| if frame.map_or(true, |s| s.contains(&i)) { w } else { w.flip() }).collect()
    }

    /// Product basis on data (Fourier columns on X sites) tensored with the ancilla identity.
    pub fn product_basis(&self, patterns: &[Basis]) -> (String, Option<Arc<Mat>>) {
        let key = format!("prod:{}", pattern_key(patterns));
        let mut cache = self.bases.lock().unwrap();
        let b = cache
            .entry(key.clone())
            .or_insert_with(|| {
                if patterns.iter().all(|&b| b == Basis::Z) {
                    return None;
                }
                let fr = fourier(self.f());
                let id = identity(self.f().q() as usize);
                let data = patterns.iter().fold(identity(1), |acc, b| kron(&acc, if *b == Basis::X { &fr } else { &id }));
                Some(Arc::new(kron(&data, &id)))
            })
            .clone();
        (key, b)
    }

    /// Measures the data register in the product basis and labels each outcome
    /// e by `label(e)`; the ancilla is ignored.
    pub fn product_measure(&self, patterns: &[Basis], label: impl Fn(&[Elem]) -> Result<Answer>) -> Result<LocalMeasurement> {
        let q = self.f().q() as usize;
        let n = self.n();
        let (key, basis) = self.product_basis(patterns);
        let data: Vec<Answer> = (0..q.pow(n as u32)).map(|j| label(&crate::qsim::msd_digits(j, q, n))).collect::<Result<_>>()?;
        let per: Vec<Answer> = data.iter().flat_map(|a| std::iter::repeat(a.clone()).take(q)).collect();
        Ok(LocalMeasurement::with_basis(Some(key), basis, per))
    }

    /// Restrictions of g_{e_i} to `s`, for each data coordinate i.
    pub fn pieces(&self, s: &AffineSubspace) -> Result<Arc<Vec<MultiPoly>>> {
        if let Some(p) = self.pieces.lock().unwrap().get(s) {
            return Ok(p.clone());
        }
        let p = Arc::new(crate::qsim::restricted_indicators(self.f(), s, &self.inj)?);
        self.pieces.lock().unwrap().insert(s.clone(), p.clone());
        Ok(p)
    }

    fn poly_measure(&self, patterns: &[Basis], pieces: &[MultiPoly]) -> Result<LocalMeasurement> {
        let f = self.f().clone();
        let ans: Vec<Answer> = pieces.iter().map(|p| Answer::Poly(p.clone())).collect();
        self.product_measure(patterns, |e| linear_answer(&f, &ans, e))
    }

    /// Physical key of a part-(b) context: patterns and the two scaled expansions.
    fn pair_key(&self, frame: Option<&[usize]>, ctx: &PairCtx) -> Result<(Vec<Basis>, Vec<Elem>, Vec<Elem>, String)> {
        let f = self.f();
        let px = self.patterns(frame, ctx.wx);
        let xv = f.scale_vec(ctx.u, &self.inj.expand(f, &ctx.x)?);
        let zv = f.scale_vec(ctx.u2, &self.inj.expand(f, &ctx.z)?);
        let key = format!("{}:{xv:?}:{zv:?}", pattern_key(&px));
        Ok((px, xv, zv, key))
    }

    /// X-role and Z-role Pauli words of a part-(b) context on the data register.
    pub fn pair_words(&self, frame: Option<&[usize]>, ctx: &PairCtx) -> Result<(Mat, Mat, String)> {
        let f = self.f();
        let (px, xv, zv, key) = self.pair_key(frame, ctx)?;
        let pz: Vec<Basis> = px.iter().map(|b| b.flip()).collect();
        Ok((mixed_word(f, &px, &xv)?, mixed_word(f, &pz, &zv)?, key))
    }

    fn cached(&self, key: String, build: impl FnOnce() -> Result<BasisMeasurement<Answer>>) -> Result<LocalMeasurement> {
        if let Some(m) = self.words.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let m = LocalMeasurement::from_basis(Some(key.clone()), build()?);
        self.words.lock().unwrap().insert(key, m.clone());
        Ok(m)
    }
}

impl Resolver for PauliProver {
    fn measure(&self, _player: usize, q: &Question) -> Result<LocalMeasurement> {
        let f = self.f().clone();
        let qd = f.q() as usize;
        let (frame, q) = q.unframe();
        match q {
            Question::Sub { basis, s } => {
                let pieces = self.pieces(s)?;
                self.poly_measure(&self.patterns(frame, *basis), &pieces)
            }
            Question::Inner { basis, s, inner } => {
                let ic = self.ld.inner.as_ref().ok_or_else(|| Error::InvalidParam("inner question at level 1".into()))?;
                let pieces = self
                    .pieces(s)?
                    .iter()
                    .map(|p| Ok(restrict(&f, &ic.encode(&f, p)?, Domain::Subspace(inner))?.poly))
                    .collect::<Result<Vec<_>>>()?;
                self.poly_measure(&self.patterns(frame, *basis), &pieces)
            }
            Question::Pair(ctx) => {
                let key = format!("pair:{}", self.pair_key(frame, ctx)?.3);
                self.cached(key, || {
                    let (xw, zw, _) = self.pair_words(frame, ctx)?;
                    Ok(joint_measurement(&[GenObservable::new(f.p(), xw)?, GenObservable::new(f.p(), zw)?])?.extend_right(qd))
                })
            }
            Question::Ms { ctx: Some(ctx), slot } => {
                let key = format!("ms:{}:{slot:?}", self.pair_key(frame, ctx)?.3);
                self.cached(key, || {
                    let (xw, zw, _) = self.pair_words(frame, ctx)?;
                    let b1 = f.self_dual_basis()?.basis[0];
                    let ops = ms_cell_ops(&xw, &zw, &tau(&f, Basis::X, b1), &tau(&f, Basis::Z, b1));
                    ms_measurement(&ops, *slot)
                })
            }
            Question::Tag(_) => Ok(LocalMeasurement::new(Some("tag".into()), None, vec![Answer::Null; self.local_dim()])),
            _ => Err(Error::InvalidParam(format!("the Pauli prover does not answer {q:?}"))),
        }
    }
}

/// Honest two-player strategy: |EPR_q>^{n+1}, ancilla pair last on each side.
pub fn honest_pauli_strategy(ld: &LowDeg, inj: &CoordInjection) -> Result<Strategy> {
    let prover = PauliProver::new(ld.clone(), inj.clone())?;
    let state = epr_state(&ld.f, inj.n + 1)?;
    let d = prover.local_dim();
    Strategy::new(state, vec![d, d], Arc::new(prover))
}

// ---------------------------------------------------------------- perturbation and diagnostics

/// exp(-i theta Y / 2) on every binary digit of every data qudit, identity on the ancilla.
pub fn data_rotation(f: &Field, n: usize, theta: f64) -> Mat {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let ry = Mat::from_row_slice(2, 2, &[C64::new(c, 0.0), C64::new(-s, 0.0), C64::new(s, 0.0), C64::new(c, 0.0)]);
    let bits = n * f.t() as usize;
    let data = (0..bits).fold(identity(1), |acc, _| kron(&acc, &ry));
    kron(&data, &identity(f.q() as usize))
}

/// Applies a pre-measurement unitary for one player on Z-basis subspace questions.
pub struct Perturbed {
    pub base: Arc<dyn Resolver>,
    pub player: usize,
    pub unitary: Arc<Mat>,
    pub tag: String,
}

impl Resolver for Perturbed {
    fn measure(&self, player: usize, q: &Question) -> Result<LocalMeasurement> {
        let m = self.base.measure(player, q)?;
        let hit = matches!(q.unframe().1, Question::Sub { basis: Basis::Z, .. } | Question::Inner { basis: Basis::Z, .. });
        if player != self.player || !hit {
            return Ok(m);
        }
        let vd = self.unitary.adjoint();
        let basis = match &m.basis {
            Some(b) => &vd * b.as_ref(),
            None => vd,
        };
        let key = m.key.as_ref().map(|k| format!("{k}|{}", self.tag));
        Ok(LocalMeasurement { key, basis: Some(Arc::new(basis)), labels: m.labels, label_of: m.label_of })
    }
}

/// Honest strategy with player 0's Z-basis subspace measurements rotated by theta.
pub fn perturbed_strategy(base: &Strategy, f: &Field, n: usize, theta: f64) -> Strategy {
    if theta == 0.0 {
        return base.clone();
    }
    let r = Perturbed { base: base.resolver.clone(), player: 0, unitary: Arc::new(data_rotation(f, n, theta)), tag: format!("ry{theta}") };
    Strategy { state: base.state.clone(), dims: base.dims.clone(), resolver: Arc::new(r) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean ||(W_u(w) (x) Id - Id (x) W'_u(w)) psi||^2 over W, w and nonzero u.
    pub xz_cons: f64,
    /// Mean ||(X_u(x) Z_u'(z) - w^{tr(...)} Z_u'(z) X_u(x)) psi||^2 over x, z and nonzero u, u'.
    pub xz_ac: f64,
    /// Rejection probability of the plane-versus-point part.
    pub subspace_point: f64,
}

/// sum_a w^{tr(a u)} M^a for a point measurement.
fn point_observable(f: &Field, m: &LocalMeasurement, u: Elem) -> Result<Mat> {
    let d = m.dim();
    let mut diag = Mat::zeros(d, d);
    for (k, &l) in m.label_of.iter().enumerate() {
        let a = m.labels[l as usize].scalar(f).ok_or_else(|| Error::FormatMismatch("point answer is not a scalar".into()))?;
        diag[(k, k)] = omega_pow(f.p(), f.trace(f.mul(a, u)));
    }
    Ok(match &m.basis {
        Some(b) => b.as_ref() * diag * b.adjoint(),
        None => diag,
    })
}

pub fn diagnostics(s: &Strategy, ld: &LowDeg, inj: &CoordInjection) -> Result<Diagnostics> {
    if s.dims.len() != 2 {
        return Err(Error::InvalidParam("diagnostics need a two-player strategy".into()));
    }
    let f = &ld.f;
    let q = f.q() as usize;
    let (d0, d1) = (s.dims[0], s.dims[1]);
    let psi = &s.state.amps;
    let pts: Vec<Vec<Elem>> = (0..q.pow(ld.m as u32)).map(|i| f.vec_from_index(i, ld.m)).collect();
    let obs = |player: usize, w: Basis, pt: &[Elem], u: Elem| -> Result<Mat> {
        point_observable(f, &s.resolver.measure(player, &Question::point(w, f, pt.to_vec()))?, u)
    };
    let dist = |a: &[C64], b: &[C64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum() };
    let mut cons = vec![];
    for w in [Basis::X, Basis::Z] {
        for pt in &pts {
            for u in 1..q as Elem {
                let a = apply_axis(psi, &obs(0, w, pt, u)?, 1, d0, d1);
                let b = apply_axis(psi, &obs(1, w, pt, u)?, d0, d1, 1);
                cons.push(dist(&a, &b));
            }
        }
    }
    let mut ac = vec![];
    for x in &pts {
        let xp = inj.expand(f, x)?;
        for z in &pts {
            let zp = inj.expand(f, z)?;
            for u in 1..q as Elem {
                let xo = obs(0, Basis::X, x, u)?;
                for u2 in 1..q as Elem {
                    let zo = obs(0, Basis::Z, z, u2)?;
                    let ph = omega_pow(f.p(), f.trace(f.dot(&f.scale_vec(u, &xp), &f.scale_vec(u2, &zp))));
                    let lhs = apply_axis(psi, &(&xo * &zo), 1, d0, d1);
                    let rhs = apply_axis(psi, &((&zo * &xo) * ph), 1, d0, d1);
                    ac.push(dist(&lhs, &rhs));
                }
            }
        }
    }
    let mut tests = vec![];
    for w in [Basis::X, Basis::Z] {
        tests.extend(lowdeg_part_a(&LowDeg { level: 1, inner: None, ..ld.clone() }, w).into_iter().map(|t| PairTest { weight: t.weight * 0.5, ..t }));
    }
    let v = exact_value(&pair_game("plane-point", f, tests)?, s)?.value;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(Diagnostics { xz_cons: mean(&cons), xz_ac: mean(&ac), subspace_point: 1.0 - v })
}

/// Product of independent games: players of `a` followed by players of `b`,
/// accepting when both accept.
pub fn product_game(a: &Game, b: &Game) -> Result<Game> {
    let ka = a.players;
    let mut rounds = vec![];
    for ra in &a.rounds {
        for rb in &b.rounds {
            let (da, db) = (ra.decide.clone(), rb.decide.clone());
            let decide: Decide = Arc::new(move |ans: &[&Answer]| {
                let (x, y) = (da(&ans[..ka]), db(&ans[ka..]));
                Verdict { accept: x.accept * y.accept, value: None }
            });
            let questions = ra.questions.iter().chain(&rb.questions).cloned().collect();
            rounds.push(Round { weight: ra.weight * rb.weight, branch: format!("{}x{}", ra.branch, rb.branch), questions, decide });
        }
    }
    Game::new(format!("{}x{}", a.name, b.name), a.players + b.players, rounds)
}

/// Product strategy on the tensor product of the two states.
pub fn product_strategy(a: &Strategy, b: &Strategy) -> Strategy {
    let ka = a.dims.len();
    let amps = a.state.amps.iter().flat_map(|x| b.state.amps.iter().map(move |y| x * y)).collect();
    let dim = a.state.dim() * b.state.dim();
    let state = StateVec { q: dim, sites: 1, amps };
    let (ra, rb) = (a.resolver.clone(), b.resolver.clone());
    let r = FnResolver(move |p: usize, q: &Question| if p < ka { ra.measure(p, q) } else { rb.measure(p - ka, q) });
    Strategy { state: Arc::new(state), dims: a.dims.iter().chain(&b.dims).copied().collect(), resolver: Arc::new(r) }
}
