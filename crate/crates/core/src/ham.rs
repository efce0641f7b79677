//! Y-free and linear XZ Hamiltonians, the eval/energy games, gap amplification,
//! term sub-sampling and the XZ game.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::css::{codecheck_rounds, css_from_code, logical_ops, CodeCheck, Frames, LinearCode};
use crate::error::{Error, Result};
use crate::games::{Answer, Game, PairTest, Question, Round, Strategy, Verdict};
use crate::gf::{Elem, Field, FieldRef};
use crate::linpcp::{sum_part_d, sum_rounds_with, sum_strategy_on, Finish, SumSetup};
use crate::qsim::{fourier, identity, kron, tau, Basis, Mat, StateVec, C64, MATRIX_CAP};

fn dense_dim(f: &Field, n: usize) -> Result<usize> {
    (f.q() as u128)
        .checked_pow(n as u32)
        .filter(|&d| d <= MATRIX_CAP as u128)
        .map(|d| d as usize)
        .ok_or_else(|| Error::DimensionCap(format!("{n} qudits of dimension {} exceed {MATRIX_CAP}", f.q())))
}

/// tau_X(u_i) on the qudits in `set`, tau_Z(u_i) elsewhere; qudit 0 leftmost.
pub fn hs_term(f: &Field, set: &[usize], u: &[Elem]) -> Result<Mat> {
    dense_dim(f, u.len())?;
    Ok(u.iter().enumerate().fold(identity(1), |acc, (i, &a)| {
        kron(&acc, &tau(f, if set.contains(&i) { Basis::X } else { Basis::Z }, a))
    }))
}

/// Ascending eigenvalues of a Hermitian matrix.
pub fn spectrum(h: &Mat) -> Result<Vec<f64>> {
    if h.nrows() > MATRIX_CAP {
        return Err(Error::DimensionCap(format!("eigensolve of dimension {}", h.nrows())));
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn min_eig(h: &Mat) -> Result<f64> {
    Ok(spectrum(h)?[0])
}

/// Lowest eigenvalue with one eigenvector, as a state on `sites` qudits of dimension q.
pub fn ground_state(h: &Mat, q: usize, sites: usize) -> Result<(f64, StateVec)> {
    if h.nrows() > MATRIX_CAP {
        return Err(Error::DimensionCap(format!("eigensolve of dimension {}", h.nrows())));
    }
    let eig = SymmetricEigen::new(h.clone());
    let (i, &lam) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let amps = eig.eigenvectors.column(i).iter().copied().collect();
    Ok((lam, StateVec::new(q, sites, amps)?))
}

/// All eigenpairs in ascending order of eigenvalue.
pub fn eigenpairs(h: &Mat, q: usize, sites: usize) -> Result<Vec<(f64, StateVec)>> {
    if h.nrows() > MATRIX_CAP {
        return Err(Error::DimensionCap(format!("eigensolve of dimension {}", h.nrows())));
    }
    let eig = SymmetricEigen::new(h.clone());
    let mut idx: Vec<usize> = (0..h.nrows()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    idx.into_iter().map(|i| Ok((eig.eigenvalues[i], StateVec::new(q, sites, eig.eigenvectors.column(i).iter().copied().collect())?))).collect()
}

/// Random Y-free Pauli sum over GF(2) rescaled so its spectrum spans [lambda, 1].
pub fn random_unit_hamiltonian<R: Rng + ?Sized>(f: &FieldRef, n: usize, lambda: f64, rng: &mut R) -> Result<PauliSum> {
    let mut g = PauliSum::zero(f.clone(), n);
    for _ in 0..4 {
        let u: Vec<Elem> = (0..n).map(|_| rng.gen_range(0..f.q())).collect();
        let set: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
        g.add(&set, &u, rng.gen_range(-1.0..1.0));
    }
    // Hermitian part, so any q works.
    let adj = PauliSum { terms: g.terms.iter().map(|((s, u), &c)| ((s.clone(), u.iter().map(|&a| f.neg(a)).collect()), c)).collect(), ..g.clone() };
    let g = g.plus(&adj, 1.0);
    let ev = spectrum(&g.dense()?)?;
    let (lo, hi) = (ev[0], *ev.last().unwrap());
    let scale = if hi - lo > 1e-9 { (1.0 - lambda) / (hi - lo) } else { 0.0 };
    Ok(PauliSum::identity(f.clone(), n, lambda - lo * scale).plus(&g, scale))
}

/// Random Y-free Hamiltonian with uniform weights and alpha uniform in [-1, 1].
pub fn random_yfree<R: Rng + ?Sized>(f: &FieldRef, n: usize, terms: usize, rng: &mut R) -> Result<YFreeHamiltonian> {
    let terms = (0..terms)
        .map(|_| YTerm {
            set: (0..n).filter(|_| rng.gen_bool(0.5)).collect(),
            u: (0..n).map(|_| rng.gen_range(0..f.q())).collect(),
            alpha: rng.gen_range(-1.0..1.0),
            weight: 1.0 / terms as f64,
        })
        .collect();
    YFreeHamiltonian::new(f.clone(), n, terms)
}

fn check_vec(f: &Field, n: usize, u: &[Elem]) -> Result<()> {
    if u.len() != n {
        return Err(Error::LengthMismatch(u.len(), n));
    }
    if let Some(a) = u.iter().find(|&&a| a >= f.q()) {
        return Err(Error::InvalidOperand(format!("{a} is not an element of GF({})", f.q())));
    }
    Ok(())
}

// ---------------------------------------------------------------- Y-free form

#[derive(Clone, Debug, PartialEq)]
pub struct YTerm {
    pub set: Vec<usize>,
    pub u: Vec<Elem>,
    pub alpha: f64,
    pub weight: f64,
}

/// H = sum_j w_j alpha_j (h_j + h_j^dagger) / 2 with h_j = hs_term(S_j, u_j).
#[derive(Clone, Debug)]
pub struct YFreeHamiltonian {
    pub f: FieldRef,
    pub n: usize,
    pub terms: Vec<YTerm>,
}

impl YFreeHamiltonian {
    pub fn new(f: FieldRef, n: usize, mut terms: Vec<YTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParam("Hamiltonian without terms".into()));
        }
        for (j, t) in terms.iter_mut().enumerate() {
            check_vec(&f, n, &t.u)?;
            t.set.sort_unstable();
            t.set.dedup();
            if t.set.iter().any(|&i| i >= n) {
                return Err(Error::InvalidParam(format!("term {j}: set {:?} outside 0..{n}", t.set)));
            }
            if !(t.alpha.abs() <= 1.0) || !(t.weight >= 0.0) {
                return Err(Error::InvalidParam(format!("term {j}: need |alpha| <= 1 and weight >= 0")));
            }
        }
        let total: f64 = terms.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("term weights sum to {total}")));
        }
        Ok(Self { f, n, terms })
    }

    pub fn dense(&self) -> Result<Mat> {
        self.pauli_sum().dense()
    }

    /// Each term puts w alpha / 2 on h and on h^dagger = hs_term(S, -u).
    pub fn pauli_sum(&self) -> PauliSum {
        let mut ps = PauliSum::zero(self.f.clone(), self.n);
        for t in &self.terms {
            let c = t.weight * t.alpha / 2.0;
            ps.add(&t.set, &t.u, c);
            ps.add(&t.set, &t.u.iter().map(|&a| self.f.neg(a)).collect::<Vec<_>>(), c);
        }
        ps
    }

    /// Probability that the energy test draws no term.
    pub fn bot_mass(&self) -> f64 {
        (1.0 - self.terms.iter().map(|t| t.weight * t.alpha.abs()).sum::<f64>()).max(0.0)
    }
}

/// sum of coefficient x hs_term(S, u), keyed canonically (S restricted to the support of u).
#[derive(Clone, Debug)]
pub struct PauliSum {
    pub f: FieldRef,
    pub n: usize,
    pub terms: BTreeMap<(Vec<usize>, Vec<Elem>), f64>,
}

impl PauliSum {
    pub fn zero(f: FieldRef, n: usize) -> Self {
        Self { f, n, terms: BTreeMap::new() }
    }

    pub fn identity(f: FieldRef, n: usize, c: f64) -> Self {
        let mut s = Self::zero(f, n);
        s.add(&[], &vec![0; n], c);
        s
    }

    pub fn add(&mut self, set: &[usize], u: &[Elem], c: f64) {
        let set: Vec<usize> = set.iter().copied().filter(|&i| u[i] != 0).collect();
        *self.terms.entry((set, u.to_vec())).or_insert(0.0) += c;
    }

    pub fn plus(&self, o: &PauliSum, c: f64) -> PauliSum {
        let mut s = self.clone();
        for ((set, u), x) in &o.terms {
            s.add(set, u, c * x);
        }
        s
    }

    /// Operator on n + o.n qudits, self on the left.
    pub fn tensor(&self, o: &PauliSum) -> PauliSum {
        let mut s = Self::zero(self.f.clone(), self.n + o.n);
        for ((s1, u1), c1) in &self.terms {
            for ((s2, u2), c2) in &o.terms {
                let set: Vec<usize> = s1.iter().copied().chain(s2.iter().map(|&i| i + self.n)).collect();
                let u: Vec<Elem> = u1.iter().chain(u2).copied().collect();
                s.add(&set, &u, c1 * c2);
            }
        }
        s
    }

    pub fn dense(&self) -> Result<Mat> {
        let d = dense_dim(&self.f, self.n)?;
        let mut m = Mat::zeros(d, d);
        for ((set, u), &c) in &self.terms {
            m += hs_term(&self.f, set, u)? * C64::new(c, 0.0);
        }
        Ok(m)
    }
}

/// Id - (Id - (H - Id/a))^{(x) a} as a Pauli sum on a*n qudits. Refused when the
/// (terms of (1 + 1/a) Id - H)^a expansion exceeds `budget`.
pub fn gap_amplify(h: &PauliSum, a: usize, budget: u64) -> Result<PauliSum> {
    if a == 0 {
        return Err(Error::InvalidParam("amplification power a must be >= 1".into()));
    }
    let m = PauliSum::identity(h.f.clone(), h.n, 1.0 + 1.0 / a as f64).plus(h, -1.0);
    let estimate = (m.terms.len() as u64).saturating_pow(a as u32);
    if estimate > budget {
        return Err(Error::BudgetExceeded { estimate, budget });
    }
    let mut p = m.clone();
    for _ in 1..a {
        p = p.tensor(&m);
    }
    Ok(PauliSum::identity(h.f.clone(), h.n * a, 1.0).plus(&p, -1.0))
}

/// Dense counterpart of `gap_amplify`.
pub fn gap_amplify_dense(h: &Mat, a: usize) -> Result<Mat> {
    if a == 0 {
        return Err(Error::InvalidParam("amplification power a must be >= 1".into()));
    }
    let d = h.nrows();
    let total = (d as u128).checked_pow(a as u32).unwrap_or(u128::MAX);
    if total > MATRIX_CAP as u128 {
        return Err(Error::DimensionCap(format!("dimension {d}^{a}")));
    }
    let m = identity(d) * C64::new(1.0 + 1.0 / a as f64, 0.0) - h;
    let p = (1..a).fold(m.clone(), |acc, _| kron(&acc, &m));
    Ok(identity(p.nrows()) - p)
}

/// `m` terms drawn i.i.d. from the term weights, each with weight 1/m.
pub fn subsample<R: Rng + ?Sized>(h: &YFreeHamiltonian, m: usize, rng: &mut R) -> Result<YFreeHamiltonian> {
    if m == 0 {
        return Err(Error::InvalidParam("subsample needs m >= 1".into()));
    }
    let dist = WeightedIndex::new(h.terms.iter().map(|t| t.weight)).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut counts = vec![0usize; h.terms.len()];
    for _ in 0..m {
        counts[dist.sample(rng)] += 1;
    }
    let terms = h
        .terms
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(t, &c)| YTerm { weight: c as f64 / m as f64, ..t.clone() })
        .collect();
    YFreeHamiltonian::new(h.f.clone(), h.n, terms)
}

/// |lambda_min| drift of the [0, 1]-rescaled operator (Id + H)/2 under subsampling, per seed.
pub fn subsample_drift(h: &YFreeHamiltonian, m: usize, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<f64>> {
    let full = min_eig(&h.dense()?)?;
    seeds
        .into_iter()
        .map(|seed| {
            let mut rng = crate::games::stream_rng(seed, "subsample", 0);
            let s = subsample(h, m, &mut rng)?;
            Ok((min_eig(&s.dense()?)? - full).abs() / 2.0)
        })
        .collect()
}

// ---------------------------------------------------------------- linear XZ form

#[derive(Clone, Debug, PartialEq)]
pub struct Equation {
    pub basis: Basis,
    pub s: Vec<Elem>,
    pub b: Elem,
}

/// H = E_j Pi_j over the equations, Pi_j the indicator of s.a != b in basis W_j.
#[derive(Clone, Debug)]
pub struct LinearXZHamiltonian {
    pub f: FieldRef,
    pub n: usize,
    pub eqs: Vec<Equation>,
}

impl LinearXZHamiltonian {
    pub fn new(f: FieldRef, n: usize, eqs: Vec<Equation>) -> Result<Self> {
        if eqs.is_empty() {
            return Err(Error::InvalidParam("Hamiltonian without equations".into()));
        }
        for (j, e) in eqs.iter().enumerate() {
            check_vec(&f, n, &e.s)?;
            if e.s.iter().all(|&a| a == 0) || e.b >= f.q() {
                return Err(Error::InvalidParam(format!("equation {j} is trivial or malformed")));
            }
        }
        Ok(Self { f, n, eqs })
    }

    pub fn projector(&self, j: usize) -> Result<Mat> {
        let f = &self.f;
        let d = dense_dim(f, self.n)?;
        let e = &self.eqs[j];
        let diag = Mat::from_diagonal(&nalgebra::DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let a = crate::qsim::msd_digits(i, f.q() as usize, self.n);
                C64::new(if f.dot(&e.s, &a) != e.b { 1.0 } else { 0.0 }, 0.0)
            }),
        ));
        Ok(match e.basis {
            Basis::Z => diag,
            Basis::X => {
                let fr = (0..self.n).fold(identity(1), |acc, _| kron(&acc, &fourier(f)));
                &fr * diag * fr.adjoint()
            }
        })
    }

    pub fn dense(&self) -> Result<Mat> {
        let d = dense_dim(&self.f, self.n)?;
        let mut m = Mat::zeros(d, d);
        for j in 0..self.eqs.len() {
            m += self.projector(j)?;
        }
        Ok(m / C64::new(self.eqs.len() as f64, 0.0))
    }
}

// ---------------------------------------------------------------- qubit embedding

/// sum_j c_j P_j with P_j a string over I, X, Y, Z (qubit 0 first).
#[derive(Clone, Debug)]
pub struct QubitHamiltonian {
    pub n: usize,
    pub terms: Vec<(f64, String)>,
}

/// Each X or Z on qubit i becomes tau_W(b_1) on qudit i of GF(2^t), b_1 the first
/// self-dual basis element. Needs sum |c_j| <= 1 so that |alpha| <= 1.
pub fn embed_qubit(h: &QubitHamiltonian, t: u32) -> Result<YFreeHamiltonian> {
    let f = Field::canonical(2, t)?;
    let b1 = f.self_dual_basis()?.basis[0];
    let z: f64 = h.terms.iter().map(|(c, _)| c.abs()).sum();
    if !(z > 0.0) || z > 1.0 + 1e-12 {
        return Err(Error::InvalidParam(format!("sum of |coefficients| is {z}, need 0 < sum <= 1")));
    }
    let mut terms = vec![];
    for (j, (c, word)) in h.terms.iter().enumerate() {
        if word.chars().count() != h.n {
            return Err(Error::LengthMismatch(word.chars().count(), h.n));
        }
        let mut set = vec![];
        let mut u = vec![];
        for (i, ch) in word.chars().enumerate() {
            match ch.to_ascii_uppercase() {
                'I' => u.push(0),
                'Z' => u.push(b1),
                'X' => {
                    set.push(i);
                    u.push(b1);
                }
                'Y' => return Err(Error::HasYTerm(j)),
                other => return Err(Error::Parse(format!("term {j}: bad Pauli letter {other:?}"))),
            }
        }
        if *c != 0.0 {
            terms.push(YTerm { set, u, alpha: c.signum() * z.min(1.0), weight: c.abs() / z });
        }
    }
    YFreeHamiltonian::new(f, h.n, terms)
}

// ---------------------------------------------------------------- text format

#[derive(Clone, Debug)]
pub enum HamFile {
    YFree(YFreeHamiltonian),
    LinearXz(LinearXZHamiltonian),
}

fn parse_elems(f: &Field, s: &str) -> Result<Vec<Elem>> {
    s.split(',')
        .map(|e| {
            let d: Vec<u32> = e.chars().map(|c| c.to_digit(10).ok_or_else(|| Error::Parse(format!("bad digit in {e:?}")))).collect::<Result<_>>()?;
            if d.len() != f.t() as usize {
                return Err(Error::Parse(format!("element {e:?} needs {} digits", f.t())));
            }
            f.from_digits(&d)
        })
        .collect()
}

fn show_elems(f: &Field, u: &[Elem]) -> String {
    u.iter().map(|&a| f.digits(a).iter().map(|d| d.to_string()).collect::<String>()).collect::<Vec<_>>().join(",")
}

fn parse_set(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(vec![]);
    }
    s.split(',').map(|x| x.parse().map_err(|_| Error::Parse(format!("bad index {x:?}")))).collect()
}

fn parse_basis(s: &str) -> Result<Basis> {
    match s {
        "X" | "x" => Ok(Basis::X),
        "Z" | "z" => Ok(Basis::Z),
        _ => Err(Error::Parse(format!("bad basis {s:?}"))),
    }
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}")))
}

/// Header "p t n kind" with kind yfree, linxz or qubit; then one term per line:
/// yfree `S u alpha [weight]`, linxz `W s b`, qubit `coef PAULIS` (embedded into
/// GF(2^t)). S is "-" or comma-separated indices; elements are t base-p digits,
/// lowest power first, separated by commas. `#` starts a comment.
pub fn parse_hamiltonian(text: &str) -> Result<HamFile> {
    let mut lines = text.lines().map(|l| l.split('#').next().unwrap().trim()).filter(|l| !l.is_empty());
    let head: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty Hamiltonian file".into()))?.split_whitespace().collect();
    let [p, t, n, kind] = head[..] else { return Err(Error::Parse("header must be \"p t n kind\"".into())) };
    let parse_u = |s: &str| s.parse::<u32>().map_err(|_| Error::Parse(format!("bad header field {s:?}")));
    let (p, t, n) = (parse_u(p)?, parse_u(t)?, parse_u(n)? as usize);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split_whitespace().collect()).collect();
    match kind {
        "qubit" => {
            if p != 2 {
                return Err(Error::Parse("qubit Hamiltonians embed into p = 2".into()));
            }
            let terms = rows
                .iter()
                .map(|r| match r[..] {
                    [c, w] => Ok((num(c)?, w.to_string())),
                    _ => Err(Error::Parse(format!("qubit line needs \"coef paulis\": {r:?}"))),
                })
                .collect::<Result<_>>()?;
            Ok(HamFile::YFree(embed_qubit(&QubitHamiltonian { n, terms }, t)?))
        }
        "yfree" => {
            let f = Field::canonical(p, t)?;
            let weighted = rows.iter().filter(|r| r.len() == 4).count();
            if weighted != 0 && weighted != rows.len() {
                return Err(Error::Parse("give a weight on every term or on none".into()));
            }
            let terms = rows
                .iter()
                .map(|r| {
                    if !(3..=4).contains(&r.len()) {
                        return Err(Error::Parse(format!("yfree line needs \"S u alpha [weight]\": {r:?}")));
                    }
                    let weight = if r.len() == 4 { num(r[3])? } else { 1.0 / rows.len() as f64 };
                    Ok(YTerm { set: parse_set(r[0])?, u: parse_elems(&f, r[1])?, alpha: num(r[2])?, weight })
                })
                .collect::<Result<_>>()?;
            Ok(HamFile::YFree(YFreeHamiltonian::new(f, n, terms)?))
        }
        "linxz" => {
            let f = Field::canonical(p, t)?;
            let eqs = rows
                .iter()
                .map(|r| match r[..] {
                    [w, s, b] => {
                        let b = parse_elems(&f, b)?;
                        if b.len() != 1 {
                            return Err(Error::Parse(format!("right-hand side {r:?} must be one element")));
                        }
                        Ok(Equation { basis: parse_basis(w)?, s: parse_elems(&f, s)?, b: b[0] })
                    }
                    _ => Err(Error::Parse(format!("linxz line needs \"W s b\": {r:?}"))),
                })
                .collect::<Result<_>>()?;
            Ok(HamFile::LinearXz(LinearXZHamiltonian::new(f, n, eqs)?))
        }
        _ => Err(Error::Parse(format!("unknown Hamiltonian kind {kind:?}"))),
    }
}

pub fn export_hamiltonian(h: &HamFile) -> String {
    let show_set = |s: &[usize]| if s.is_empty() { "-".to_string() } else { s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",") };
    match h {
        HamFile::YFree(h) => {
            let mut out = format!("{} {} {} yfree\n", h.f.p(), h.f.t(), h.n);
            for t in &h.terms {
                out += &format!("{} {} {} {}\n", show_set(&t.set), show_elems(&h.f, &t.u), t.alpha, t.weight);
            }
            out
        }
        HamFile::LinearXz(h) => {
            let mut out = format!("{} {} {} linxz\n", h.f.p(), h.f.t(), h.n);
            for e in &h.eqs {
                let w = if e.basis == Basis::X { "X" } else { "Z" };
                out += &format!("{w} {} {}\n", show_elems(&h.f, &e.s), show_elems(&h.f, &[e.b]));
            }
            out
        }
    }
}

// ---------------------------------------------------------------- eval and energy games

/// A draw of the energy test's term sampler.
#[derive(Clone, Debug, PartialEq)]
pub enum TermSample {
    Term { set: Vec<usize>, u: Vec<Elem>, eps: i8 },
    Bot,
}

/// (S, u, sign alpha) with probability w |alpha|, the rest on Bot.
pub fn term_samples(h: &YFreeHamiltonian) -> Vec<(f64, TermSample)> {
    let mut out: Vec<(f64, TermSample)> = h
        .terms
        .iter()
        .filter(|t| t.weight * t.alpha.abs() > 0.0)
        .map(|t| {
            let eps = if t.alpha < 0.0 { -1 } else { 1 };
            (t.weight * t.alpha.abs(), TermSample::Term { set: t.set.clone(), u: t.u.clone(), eps })
        })
        .collect();
    let bot = h.bot_mass();
    if bot > 1e-15 {
        out.push((bot, TermSample::Bot));
    }
    out
}

/// Code, sum-test parameters and logical words shared by eval, energy and XZ games.
#[derive(Clone)]
pub struct EvalSetup {
    pub sum: SumSetup,
    pub tests: Vec<PairTest>,
    pub xbar: Vec<Elem>,
    pub zbar: Vec<Elem>,
}

impl EvalSetup {
    pub fn new(code: LinearCode, n: usize, h: u32) -> Result<Self> {
        let (xbar, zbar) = logical_ops(&css_from_code(&code)?)?;
        let tests = CodeCheck::new(code.clone(), n, h, 1)?.tests()?;
        Ok(Self { sum: SumSetup::new(code, n, h)?, tests, xbar, zbar })
    }

    pub fn with_sum_weights(mut self, w: [f64; 4]) -> Result<Self> {
        self.sum = self.sum.with_weights(w)?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.sum.n()
    }

    pub fn k(&self) -> usize {
        self.sum.code.k
    }

    fn frame(&self, set: &[usize]) -> Option<Vec<usize>> {
        (set.len() != self.n()).then(|| set.to_vec())
    }

    fn complement(&self, set: &[usize]) -> Vec<usize> {
        (0..self.n()).filter(|i| !set.contains(i)).collect()
    }

    /// Strategy of honest provers sharing the encoding of `psi`.
    pub fn strategy(&self, psi: &StateVec) -> Result<Strategy> {
        let css = css_from_code(&self.sum.code)?;
        sum_strategy_on(&self.sum, crate::css::shared_state(&css, self.n(), Some(psi))?)
    }
}

fn reweigh(rounds: Vec<Round>, w: f64, branch: &str) -> impl Iterator<Item = Round> + '_ {
    rounds.into_iter().map(move |r| Round { weight: r.weight * w, branch: branch.to_string(), ..r })
}

/// Part (a) for one term: code-check under the four sets and their complemented
/// pairings, then the sum consistency check against a random stabilizer.
fn test_part(es: &EvalSetup, set: &[usize], u: &[Elem]) -> Result<Vec<Round>> {
    let n = es.n();
    let f = es.sum.f().clone();
    let code = &es.sum.code;
    let comp = es.complement(set);
    let all: Vec<usize> = (0..n).collect();
    let flipped: Vec<PairTest> = es.tests.iter().map(|t| PairTest { second: t.second.flipped(), ..t.clone() }).collect();
    let mut out = vec![];
    for ts in [set.to_vec(), comp.clone(), vec![], all.clone()] {
        let same: Frames = (es.frame(&ts), es.frame(&ts));
        out.extend(reweigh(codecheck_rounds(code, es.tests.clone(), &same)?, 0.5 * 0.5 * 0.25, "test-cc"));
        let crossed: Frames = (es.frame(&ts), es.frame(&es.complement(&ts)));
        out.extend(reweigh(codecheck_rounds(code, flipped.clone(), &crossed)?, 0.5 * 0.5 * 0.25, "test-cc-flip"));
    }
    let words = code.codewords();
    for (composite, support) in [(vec![], &comp), (all.clone(), &set.to_vec())] {
        let s: Vec<Elem> = (0..n).map(|i| if support.contains(&i) { u[i] } else { 0 }).collect();
        let cf = es.frame(&composite);
        for v in &words {
            let bs: Vec<Vec<Elem>> = v.iter().map(|&vj| f.scale_vec(vj, &s)).collect();
            let rounds = sum_rounds_with(&es.sum, Basis::X, &bs, &(cf.clone(), cf.clone()), &(es.frame(set), cf.clone()), Finish::TraceZero)?;
            out.extend(reweigh(rounds, 0.5 * 0.5 / words.len() as f64, "test-sum"));
        }
    }
    Ok(out)
}

/// Part (b) for one term: every prover measures with set S in basis X and
/// reports u_i = xbar_i u on S, zbar_i u off S; emits (-1)^{tr sum c}.
fn eval_part(es: &EvalSetup, set: &[usize], u: &[Elem]) -> Result<Vec<Round>> {
    let f = es.sum.f();
    let bs: Vec<Vec<Elem>> = (0..es.k())
        .map(|i| (0..es.n()).map(|l| f.mul(if set.contains(&l) { es.xbar[i] } else { es.zbar[i] }, u[l])).collect())
        .collect();
    sum_part_d(&es.sum, Basis::X, &bs, &vec![es.frame(set); es.k()], Finish::Emit)
}

fn tag_round(weight: f64, branch: &str, players: usize, accept: bool) -> Round {
    Round {
        weight,
        branch: branch.into(),
        questions: vec![Question::Tag("bot".into()); players],
        decide: Arc::new(move |_: &[&Answer]| Verdict::from_bool(accept)),
    }
}

/// Eval rounds over a term distribution. With `energy`, eval rounds accept
/// with probability (1 - e)/2 for the returned e, and Bot rejects there while
/// auto-accepting in the test part.
fn eval_rounds(es: &EvalSetup, pi: &[(f64, TermSample)], xi: f64, energy: bool) -> Result<Vec<Round>> {
    if es.sum.f().p() != 2 {
        return Err(Error::UnsupportedPrime(es.sum.f().p()));
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::InvalidParam(format!("xi = {xi} outside [0, 1]")));
    }
    let total: f64 = pi.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!("term distribution sums to {total}")));
    }
    let k = es.k();
    let mut out = vec![];
    for (i, (w, sample)) in pi.iter().enumerate() {
        match sample {
            TermSample::Bot => {
                out.push(tag_round((1.0 - xi) * w, "test-bot", k, true));
                out.push(tag_round(xi * w, "eval-bot", k, false));
            }
            TermSample::Term { set, u, eps } => {
                check_vec(es.sum.f(), es.n(), u)?;
                if xi < 1.0 {
                    out.extend(reweigh(test_part(es, set, u)?, (1.0 - xi) * w, "test"));
                }
                if xi > 0.0 {
                    let eps = *eps as f64;
                    let branch = format!("eval:{i}");
                    out.extend(reweigh(eval_part(es, set, u)?, xi * w, &branch).map(|r| {
                        let inner = r.decide.clone();
                        Round {
                            decide: Arc::new(move |a: &[&Answer]| {
                                let v = inner(a);
                                let e = v.value.map(|x| eps * x);
                                match (energy, e) {
                                    (true, Some(e)) => Verdict { accept: v.accept * 0.5 * (1.0 - e), value: Some(e) },
                                    (true, None) => Verdict::reject(),
                                    (false, _) => Verdict { accept: v.accept, value: e },
                                }
                            }),
                            ..r
                        }
                    }));
                }
            }
        }
    }
    Ok(out.into_iter().filter(|r| r.weight > 0.0).collect())
}

/// Test part with weight 1 - xi, eval part with weight xi; branch "eval:i"
/// emits eps (-1)^{tr sum c} for the i-th entry of `pi`.
pub fn eval_game(es: &EvalSetup, pi: &[(f64, TermSample)], xi: f64) -> Result<Game> {
    Game::new("eval", es.k(), eval_rounds(es, pi, xi, false)?)
}

pub fn energy_game(es: &EvalSetup, h: &YFreeHamiltonian, xi: f64) -> Result<Game> {
    if h.n != es.n() || h.f.q() != es.sum.f().q() {
        return Err(Error::DimensionMismatch(format!("Hamiltonian on {} qudits of GF({}), test on {}", h.n, h.f.q(), es.n())));
    }
    Game::new("energy", es.k(), eval_rounds(es, &term_samples(h), xi, true)?)
}

// ---------------------------------------------------------------- XZ game

/// Distribution of the aggregated equation sum_l y_l (s_l, b_l) in basis `w`:
/// each of `copies` blocks draws an equation uniformly, those in basis `w` are
/// shifted into their block, and y is uniform.
pub fn aggregated_equations(h: &LinearXZHamiltonian, copies: usize, w: Basis) -> Result<Vec<(Vec<Elem>, Elem, f64)>> {
    let f = &h.f;
    let l = h.eqs.len();
    let tuples = (l as u64).checked_pow(copies as u32).filter(|&x| x <= 1 << 16).ok_or_else(|| Error::BudgetExceeded {
        estimate: (l as u64).saturating_pow(copies as u32),
        budget: 1 << 16,
    })?;
    let q = f.q() as u64;
    let mut dist: BTreeMap<(Vec<Elem>, Elem), f64> = BTreeMap::new();
    for idx in 0..tuples {
        let mut rows = vec![];
        let mut x = idx;
        for c in 0..copies {
            let e = &h.eqs[(x % l as u64) as usize];
            x /= l as u64;
            if e.basis == w {
                let mut s = vec![0; copies * h.n];
                s[c * h.n..(c + 1) * h.n].copy_from_slice(&e.s);
                rows.push((s, e.b));
            }
        }
        let ys = q.pow(rows.len() as u32);
        for yi in 0..ys {
            let y = f.vec_from_index(yi as usize, rows.len());
            let mut s = vec![0; copies * h.n];
            let mut b = 0;
            for (c, (sr, br)) in y.iter().zip(&rows) {
                for (a, &x) in s.iter_mut().zip(sr) {
                    *a = f.add(*a, f.mul(*c, x));
                }
                b = f.add(b, f.mul(*c, *br));
            }
            *dist.entry((s, b)).or_insert(0.0) += 1.0 / (tuples as f64 * ys as f64);
        }
    }
    Ok(dist.into_iter().map(|((s, b), p)| (s, b, p)).collect())
}

/// The XZ test on `copies` blocks of an n-qudit Hamiltonian: branch "eq-W" runs
/// sum(C, W, {wbar_j s}) and rejects unless sum_j c_j = b; branch "cc" is the
/// code-check on copies*n qudits. Weights 1/2 each, W uniform.
pub fn xz_game(es: &EvalSetup, h: &LinearXZHamiltonian, copies: usize) -> Result<Game> {
    let f = es.sum.f().clone();
    if f.p() != 2 {
        return Err(Error::UnsupportedPrime(f.p()));
    }
    if h.n * copies != es.n() || h.f.q() != f.q() {
        return Err(Error::DimensionMismatch(format!("{copies} copies of {} qudits vs a test on {}", h.n, es.n())));
    }
    let words = es.sum.code.codewords();
    let mut out = vec![];
    for (w, logical) in [(Basis::X, &es.xbar), (Basis::Z, &es.zbar)] {
        let branch = format!("eq-{}", if w == Basis::X { "X" } else { "Z" });
        for (s, b, p) in aggregated_equations(h, copies, w)? {
            for c in &words {
                let wbar: Vec<Elem> = logical.iter().zip(c).map(|(&x, &y)| f.add(x, y)).collect();
                let bs: Vec<Vec<Elem>> = wbar.iter().map(|&wj| f.scale_vec(wj, &s)).collect();
                let rounds = sum_rounds_with(&es.sum, w, &bs, &(None, None), &(None, None), Finish::Equals(b))?;
                out.extend(reweigh(rounds, 0.5 * 0.5 * p / words.len() as f64, &branch));
            }
        }
    }
    out.extend(reweigh(codecheck_rounds(&es.sum.code, es.tests.clone(), &(None, None))?, 0.5, "cc"));
    Game::new("xz", es.k(), out.into_iter().filter(|r| r.weight > 0.0).collect())
}

pub fn tensor_power(psi: &StateVec, copies: usize) -> StateVec {
    (1..copies).fold(psi.clone(), |acc, _| acc.kron(psi))
}
