//! Dense state-vector simulation with generalized Pauli operators over GF(q).
//!
//! Sites are ordered most significant first, so `kron(A, B)` acts with A on the
//! lower-numbered sites. Tolerances: constructions are checked to [`TOL_BUILD`],
//! numerical comparisons to [`TOL_CMP`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::Hash;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::{Elem, Field};
use crate::rmpoly::{restrict, AffineSubspace, CoordInjection, Domain, MultiPoly, RestrictedPoly};

pub type C64 = Complex64;
pub type Mat = DMatrix<C64>;

pub const TOL_BUILD: f64 = 1e-10;
pub const TOL_CMP: f64 = 1e-9;
/// Largest dense state, in qubits' worth of amplitudes.
pub const STATE_CAP_BITS: f64 = 24.0;
/// Largest dense operator matrix dimension.
pub const MATRIX_CAP: usize = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    X,
    Z,
}

impl Basis {
    pub fn flip(self) -> Basis {
        match self {
            Basis::X => Basis::Z,
            Basis::Z => Basis::X,
        }
    }
}

pub fn omega(p: u32) -> C64 {
    C64::from_polar(1.0, 2.0 * PI / p as f64)
}

pub fn omega_pow(p: u32, k: u32) -> C64 {
    C64::from_polar(1.0, 2.0 * PI * (k % p) as f64 / p as f64)
}

fn cap_check(q: u32, sites: usize) -> Result<()> {
    let bits = sites as f64 * (q as f64).log2();
    if bits > STATE_CAP_BITS + 1e-9 {
        return Err(Error::DimensionCap(format!("{sites} sites of dimension {q} exceed 2^24 amplitudes")));
    }
    Ok(())
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn identity(d: usize) -> Mat {
    Mat::identity(d, d)
}

pub fn is_unitary(m: &Mat, tol: f64) -> bool {
    (m.adjoint() * m - identity(m.nrows())).norm() <= tol * m.nrows() as f64
}

pub fn is_hermitian(m: &Mat, tol: f64) -> bool {
    (m.adjoint() - m).norm() <= tol * m.nrows() as f64
}

/// Single-site generalized Pauli tau_W(a).
pub fn tau(f: &Field, w: Basis, a: Elem) -> Mat {
    let q = f.q() as usize;
    let mut m = Mat::zeros(q, q);
    for j in 0..q as u32 {
        match w {
            Basis::X => m[(f.add(j, a) as usize, j as usize)] = C64::new(1.0, 0.0),
            Basis::Z => m[(j as usize, j as usize)] = omega_pow(f.p(), f.trace(f.mul(a, j))),
        }
    }
    m
}

/// tau_W(a b_l), the W Pauli on the l-th qupit of the self-dual decomposition.
pub fn sigma(f: &Field, w: Basis, l: usize, a: Elem) -> Result<Mat> {
    let b = f.self_dual_basis()?;
    let bl = *b.basis.get(l).ok_or_else(|| Error::InvalidParam(format!("qupit index {l} >= t")))?;
    Ok(tau(f, w, f.mul(a, bl)))
}

/// Quantum Fourier transform over GF(q): |k> -> q^{-1/2} sum_j w^{-tr(jk)} |j>.
pub fn fourier(f: &Field) -> Mat {
    let q = f.q() as usize;
    let s = 1.0 / (q as f64).sqrt();
    Mat::from_fn(q, q, |j, k| {
        let tr = f.trace(f.mul(j as u32, k as u32));
        omega_pow(f.p(), (f.p() - tr) % f.p()) * s
    })
}

/// Tensor-product Pauli word applied without materializing its matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PauliWord {
    pub basis: Basis,
    pub vec: Vec<Elem>,
}

impl PauliWord {
    pub fn new(f: &Field, basis: Basis, vec: Vec<Elem>) -> Result<Self> {
        cap_check(f.q(), vec.len())?;
        if vec.iter().any(|&x| x >= f.q()) {
            return Err(Error::InvalidOperand("entry outside the field".into()));
        }
        Ok(Self { basis, vec })
    }

    pub fn to_dense(&self, f: &Field) -> Result<Mat> {
        let dim = (f.q() as usize).pow(self.vec.len() as u32);
        if dim > MATRIX_CAP {
            return Err(Error::DimensionCap(format!("dense word of dimension {dim}")));
        }
        Ok(self.vec.iter().fold(identity(1), |acc, &a| kron(&acc, &tau(f, self.basis, a))))
    }

    /// Applies the word to sites first..first+len of `psi`.
    pub fn apply(&self, f: &Field, psi: &StateVec, first: usize) -> StateVec {
        let q = f.q() as usize;
        let k = self.vec.len();
        let right = q.pow((psi.sites - first - k) as u32);
        let mid = q.pow(k as u32);
        let mut out = vec![C64::new(0.0, 0.0); psi.amps.len()];
        let digits: Vec<Vec<Elem>> = (0..mid).map(|j| msd_digits(j, q, k)).collect();
        let image: Vec<(usize, C64)> = digits
            .iter()
            .map(|d| match self.basis {
                Basis::X => (msd_index(&f.add_vec(d, &self.vec), q), C64::new(1.0, 0.0)),
                Basis::Z => (msd_index(d, q), omega_pow(f.p(), f.trace(f.dot(&self.vec, d)))),
            })
            .collect();
        for (idx, a) in psi.amps.iter().enumerate() {
            if a.norm_sqr() == 0.0 {
                continue;
            }
            let (l, rest) = (idx / (mid * right), idx % (mid * right));
            let (j, r) = (rest / right, rest % right);
            let (j2, ph) = image[j];
            out[(l * mid + j2) * right + r] += ph * a;
        }
        StateVec { q: psi.q, sites: psi.sites, amps: out }
    }
}

pub fn pauli_word(f: &Field, w: Basis, a: &[Elem]) -> Result<PauliWord> {
    PauliWord::new(f, w, a.to_vec())
}

/// Digits of j base q over k sites, most significant first.
pub fn msd_digits(mut j: usize, q: usize, k: usize) -> Vec<Elem> {
    let mut d = vec![0; k];
    for s in (0..k).rev() {
        d[s] = (j % q) as Elem;
        j /= q;
    }
    d
}

pub fn msd_index(d: &[Elem], q: usize) -> usize {
    d.iter().fold(0, |acc, &x| acc * q + x as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVec {
    pub q: usize,
    pub sites: usize,
    pub amps: Vec<C64>,
}

impl StateVec {
    pub fn new(q: usize, sites: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != q.pow(sites as u32) {
            return Err(Error::DimensionMismatch(format!("{} amplitudes for {sites} sites of dim {q}", amps.len())));
        }
        let s = Self { q, sites, amps };
        if (s.norm() - 1.0).abs() > TOL_BUILD {
            return Err(Error::InvalidParam(format!("state norm {} != 1", s.norm())));
        }
        Ok(s)
    }

    pub fn basis_state(q: usize, digits: &[Elem]) -> Self {
        let mut amps = vec![C64::new(0.0, 0.0); q.pow(digits.len() as u32)];
        amps[msd_index(digits, q)] = C64::new(1.0, 0.0);
        Self { q, sites: digits.len(), amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn inner(&self, o: &StateVec) -> C64 {
        self.amps.iter().zip(&o.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn kron(&self, o: &StateVec) -> StateVec {
        let mut amps = Vec::with_capacity(self.dim() * o.dim());
        for a in &self.amps {
            for b in &o.amps {
                amps.push(a * b);
            }
        }
        StateVec { q: self.q, sites: self.sites + o.sites, amps }
    }

    pub fn sub(&self, o: &StateVec) -> StateVec {
        StateVec { q: self.q, sites: self.sites, amps: self.amps.iter().zip(&o.amps).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, c: C64) -> StateVec {
        StateVec { q: self.q, sites: self.sites, amps: self.amps.iter().map(|a| a * c).collect() }
    }

    /// Applies a q^k x q^k matrix to sites first..first+k.
    pub fn apply_local(&self, m: &Mat, first: usize) -> Result<StateVec> {
        let mid = m.nrows();
        let k = (mid as f64).log(self.q as f64).round() as usize;
        if self.q.pow(k as u32) != mid || first + k > self.sites {
            return Err(Error::DimensionMismatch(format!("operator of dim {mid} at site {first} of {}", self.sites)));
        }
        let right = self.q.pow((self.sites - first - k) as u32);
        let left = self.dim() / (mid * right);
        Ok(StateVec { q: self.q, sites: self.sites, amps: apply_axis(&self.amps, m, left, mid, right) })
    }

    /// Reorders sites so that new site i is old site perm[i].
    pub fn permute_sites(&self, perm: &[usize]) -> StateVec {
        let n = self.sites;
        let mut out = vec![C64::new(0.0, 0.0); self.dim()];
        for (idx, a) in self.amps.iter().enumerate() {
            let d = msd_digits(idx, self.q, n);
            let nd: Vec<Elem> = perm.iter().map(|&o| d[o]).collect();
            out[msd_index(&nd, self.q)] = *a;
        }
        StateVec { q: self.q, sites: n, amps: out }
    }

    /// Debug export: u64 header (q, sites, len) then interleaved re/im f64, little endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 16 * self.dim());
        for h in [self.q as u64, self.sites as u64, self.dim() as u64] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for a in &self.amps {
            out.extend_from_slice(&a.re.to_le_bytes());
            out.extend_from_slice(&a.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<StateVec> {
        let rd = |i: usize| -> Result<[u8; 8]> {
            b.get(i..i + 8).and_then(|s| s.try_into().ok()).ok_or_else(|| Error::Parse("truncated state".into()))
        };
        let q = u64::from_le_bytes(rd(0)?) as usize;
        let sites = u64::from_le_bytes(rd(8)?) as usize;
        let len = u64::from_le_bytes(rd(16)?) as usize;
        let amps = (0..len)
            .map(|k| Ok(C64::new(f64::from_le_bytes(rd(24 + 16 * k)?), f64::from_le_bytes(rd(32 + 16 * k)?))))
            .collect::<Result<Vec<_>>>()?;
        StateVec::new(q, sites, amps)
    }
}

/// Matrix export in the same layout as [`StateVec::to_bytes`]: header (rows, cols, len).
pub fn mat_to_bytes(m: &Mat) -> Vec<u8> {
    let mut out = vec![];
    for h in [m.nrows() as u64, m.ncols() as u64, (m.nrows() * m.ncols()) as u64] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].re.to_le_bytes());
            out.extend_from_slice(&m[(i, j)].im.to_le_bytes());
        }
    }
    out
}

/// out[l, i, r] = sum_j m[i, j] v[l, j, r].
pub fn apply_axis(v: &[C64], m: &Mat, left: usize, mid: usize, right: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); v.len()];
    let mut buf = vec![C64::new(0.0, 0.0); mid];
    for l in 0..left {
        for r in 0..right {
            let base = l * mid * right + r;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = v[base + j * right];
            }
            if buf.iter().all(|b| b.norm_sqr() == 0.0) {
                continue;
            }
            for i in 0..mid {
                let mut acc = C64::new(0.0, 0.0);
                for (j, b) in buf.iter().enumerate() {
                    acc += m[(i, j)] * b;
                }
                out[base + i * right] = acc;
            }
        }
    }
    out
}

/// |EPR_q>^{n}: sites 0..n form one register, n..2n the other, paired by index.
pub fn epr_state(f: &Field, n: usize) -> Result<StateVec> {
    cap_check(f.q(), 2 * n)?;
    let q = f.q() as usize;
    let qn = q.pow(n as u32);
    let mut amps = vec![C64::new(0.0, 0.0); qn * qn];
    let s = 1.0 / (qn as f64).sqrt();
    for j in 0..qn {
        amps[j * qn + j] = C64::new(s, 0.0);
    }
    Ok(StateVec { q, sites: 2 * n, amps })
}

/// Projective measurement given as labeled projectors.
#[derive(Clone, Debug)]
pub struct ProjMeasurement<L> {
    pub elements: Vec<(L, Mat)>,
}

impl<L: Clone> ProjMeasurement<L> {
    pub fn dim(&self) -> usize {
        self.elements.first().map(|e| e.1.nrows()).unwrap_or(0)
    }

    /// Checks idempotence, hermiticity, orthogonality and completeness.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let d = self.dim();
        let mut sum = Mat::zeros(d, d);
        for (i, (_, p)) in self.elements.iter().enumerate() {
            if !is_hermitian(p, tol) || (p * p - p).norm() > tol * d as f64 {
                return Err(Error::InvalidParam(format!("element {i} is not a projector")));
            }
            for (_, p2) in &self.elements[i + 1..] {
                if (p * p2).norm() > tol * d as f64 {
                    return Err(Error::InvalidParam("elements are not orthogonal".into()));
                }
            }
            sum += p;
        }
        if (sum - identity(d)).norm() > tol * d as f64 {
            return Err(Error::InvalidParam("elements do not sum to identity".into()));
        }
        Ok(())
    }

    /// Rank-one refinement: an orthonormal basis with one label per vector.
    pub fn to_basis(&self) -> Result<BasisMeasurement<L>> {
        let d = self.dim();
        let mut cols = vec![];
        let mut labels = vec![];
        for (l, p) in &self.elements {
            let eig = nalgebra::SymmetricEigen::new(p.clone());
            for (k, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev > 0.5 {
                    cols.push(eig.eigenvectors.column(k).into_owned());
                    labels.push(l.clone());
                }
            }
        }
        if cols.len() != d {
            return Err(Error::InvalidParam(format!("projector ranks sum to {} not {d}", cols.len())));
        }
        Ok(BasisMeasurement { basis: Some(Mat::from_columns(&cols)), labels })
    }

    pub fn map_labels<M>(self, g: impl Fn(L) -> M) -> ProjMeasurement<M> {
        ProjMeasurement { elements: self.elements.into_iter().map(|(l, p)| (g(l), p)).collect() }
    }
}

/// Measurement in an orthonormal basis (columns; `None` = computational), one label per vector.
#[derive(Clone, Debug)]
pub struct BasisMeasurement<L> {
    pub basis: Option<Mat>,
    pub labels: Vec<L>,
}

impl<L: Clone + Eq + Hash> BasisMeasurement<L> {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Groups basis vectors by label into projectors (first-seen label order).
    pub fn to_proj(&self) -> ProjMeasurement<L> {
        let d = self.dim();
        let mut order: Vec<L> = vec![];
        let mut groups: HashMap<L, Mat> = HashMap::new();
        for (k, l) in self.labels.iter().enumerate() {
            let v = match &self.basis {
                Some(b) => b.column(k).into_owned(),
                None => {
                    let mut e = nalgebra::DVector::zeros(d);
                    e[k] = C64::new(1.0, 0.0);
                    e
                }
            };
            let proj = &v * v.adjoint();
            match groups.get_mut(l) {
                Some(p) => *p += proj,
                None => {
                    order.push(l.clone());
                    groups.insert(l.clone(), proj);
                }
            }
        }
        ProjMeasurement { elements: order.into_iter().map(|l| { let p = groups.remove(&l).unwrap(); (l, p) }).collect() }
    }

    pub fn map_labels<M>(&self, g: impl Fn(&L) -> M) -> BasisMeasurement<M> {
        BasisMeasurement { basis: self.basis.clone(), labels: self.labels.iter().map(g).collect() }
    }

    /// Pre-measurement unitary V: measuring V psi in this basis.
    pub fn conjugated(&self, v: &Mat) -> BasisMeasurement<L> {
        let vd = v.adjoint();
        let basis = match &self.basis {
            Some(b) => vd * b,
            None => vd,
        };
        BasisMeasurement { basis: Some(basis), labels: self.labels.clone() }
    }

    /// Extends to a larger local space by tensoring an identity on trailing sites.
    pub fn extend_right(&self, extra_dim: usize) -> BasisMeasurement<L> {
        let basis = self.basis.as_ref().map(|b| kron(b, &identity(extra_dim)));
        let labels = self.labels.iter().flat_map(|l| std::iter::repeat(l.clone()).take(extra_dim)).collect();
        BasisMeasurement { basis, labels }
    }
}

/// Product basis of tau_W eigenvectors on n sites, labeled by e in GF(q)^n.
pub fn basis_measurement(f: &Field, w: Basis, n: usize) -> Result<BasisMeasurement<Vec<Elem>>> {
    let q = f.q() as usize;
    let dim = q.pow(n as u32);
    if dim > MATRIX_CAP {
        return Err(Error::DimensionCap(format!("local dimension {dim}")));
    }
    let labels = (0..dim).map(|j| msd_digits(j, q, n)).collect();
    let basis = match w {
        Basis::Z => None,
        Basis::X => {
            let fr = fourier(f);
            Some((0..n).fold(identity(1), |acc, _| kron(&acc, &fr)))
        }
    };
    Ok(BasisMeasurement { basis, labels })
}

/// Coarse-graining of the W basis by a -> (g_a)|_s. The conjugate variant
/// reports -r for W = X.
pub fn subspace_measurement(
    f: &Field,
    w: Basis,
    s: &AffineSubspace,
    inj: &CoordInjection,
    d: u32,
    conjugate: bool,
) -> Result<BasisMeasurement<RestrictedPoly>> {
    let base = basis_measurement(f, w, inj.n)?;
    let pieces = restricted_indicators(f, s, inj)?;
    let neg = conjugate && w == Basis::X;
    let mut labels = Vec::with_capacity(base.dim());
    for a in &base.labels {
        let mut r = MultiPoly::zero(s.dim());
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0 {
                r = r.add(f, &pieces[i].scale(f, ai));
            }
        }
        if neg {
            r = r.scale(f, f.neg(1));
        }
        if r.total_degree() > d {
            return Err(Error::InvalidParam(format!("restriction has degree {} > {d}", r.total_degree())));
        }
        labels.push(RestrictedPoly { poly: r });
    }
    Ok(BasisMeasurement { basis: base.basis, labels })
}

/// (g_{e_i})|_s for each i; restriction is linear in a.
pub fn restricted_indicators(f: &Field, s: &AffineSubspace, inj: &CoordInjection) -> Result<Vec<MultiPoly>> {
    (0..inj.n)
        .map(|i| {
            let mut e = vec![0; inj.n];
            e[i] = 1;
            Ok(restrict(f, &inj.encode(f, &e)?, Domain::Subspace(s))?.poly)
        })
        .collect()
}

fn check_meas_dim<L>(psi: &StateVec, dim: usize, first: usize) -> Result<(usize, usize)> {
    let right_sites = (0..=psi.sites - first).find(|&k| psi.q.pow(k as u32) * dim * psi.q.pow(first as u32) == psi.dim());
    match right_sites {
        Some(k) => Ok((psi.q.pow(first as u32), psi.q.pow(k as u32))),
        None => Err(Error::DimensionMismatch(format!("measurement of dim {dim} at site {first}"))),
    }
}

/// Born-rule distribution of a projective measurement on sites starting at `first`.
pub fn outcome_distribution<L: Clone + Eq + Hash>(psi: &StateVec, meas: &ProjMeasurement<L>, first: usize) -> Result<Vec<(L, f64)>> {
    let (left, right) = check_meas_dim::<L>(psi, meas.dim(), first)?;
    let mut out = vec![];
    for (l, p) in &meas.elements {
        let v = apply_axis(&psi.amps, p, left, meas.dim(), right);
        out.push((l.clone(), v.iter().map(|a| a.norm_sqr()).sum()));
    }
    Ok(out)
}

/// Samples an outcome and returns the normalized post-measurement state.
pub fn measure<L: Clone + Eq + Hash, R: Rng + ?Sized>(
    psi: &StateVec,
    meas: &ProjMeasurement<L>,
    first: usize,
    rng: &mut R,
) -> Result<(L, StateVec)> {
    let (left, right) = check_meas_dim::<L>(psi, meas.dim(), first)?;
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (l, p) in &meas.elements {
        let v = apply_axis(&psi.amps, p, left, meas.dim(), right);
        let pr: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        if pr <= 0.0 {
            continue;
        }
        acc += pr;
        last = Some((l.clone(), v, pr));
        if x < acc {
            break;
        }
    }
    let (l, v, pr) = last.ok_or_else(|| Error::InvalidParam("measurement has no support".into()))?;
    let s = 1.0 / pr.sqrt();
    Ok((l, StateVec { q: psi.q, sites: psi.sites, amps: v.into_iter().map(|a| a * s).collect() }))
}

/// ||((A - B) (x) Id) psi||^2 with A, B on the leading sites.
pub fn state_dep_dist(a: &Mat, b: &Mat, psi: &StateVec) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let v = psi.apply_local(&(a - b), 0)?;
    Ok(v.norm().powi(2))
}

/// Unitary with B's eigenvectors and eigenvalues rounded to the nearest s-th roots of unity.
pub fn round_to_roots(b: &Mat, s: u32) -> Result<Mat> {
    let d = b.nrows();
    let comm = (b * b.adjoint() - b.adjoint() * b).norm();
    if comm > 1e-8 * (1.0 + b.norm().powi(2)) {
        return Err(Error::NotNormal(comm));
    }
    let (qm, t) = nalgebra::Schur::new(b.clone()).unpack();
    let mut diag = Mat::zeros(d, d);
    for k in 0..d {
        let lam = t[(k, k)];
        let theta = if lam.norm() == 0.0 { 0.0 } else { lam.arg() };
        let j = (theta * s as f64 / (2.0 * PI)).round();
        diag[(k, k)] = C64::from_polar(1.0, 2.0 * PI * j / s as f64);
    }
    Ok(&qm * diag * qm.adjoint())
}

/// Order-p unitary observable with its eigenprojectors P^e (eigenvalue w^e).
#[derive(Clone, Debug)]
pub struct GenObservable {
    pub p: u32,
    pub op: Mat,
}

impl GenObservable {
    pub fn new(p: u32, op: Mat) -> Result<Self> {
        let d = op.nrows();
        if !is_unitary(&op, TOL_BUILD) {
            return Err(Error::InvalidParam("observable is not unitary".into()));
        }
        let mut pw = identity(d);
        for _ in 0..p {
            pw = &pw * &op;
        }
        if (pw - identity(d)).norm() > TOL_CMP * d as f64 {
            return Err(Error::InvalidParam(format!("observable does not have order {p}")));
        }
        Ok(Self { p, op })
    }

    pub fn projectors(&self) -> Vec<Mat> {
        let d = self.op.nrows();
        let mut powers = vec![identity(d)];
        for j in 1..self.p as usize {
            powers.push(&powers[j - 1] * &self.op);
        }
        (0..self.p)
            .map(|e| {
                let mut acc = Mat::zeros(d, d);
                for (j, pj) in powers.iter().enumerate() {
                    acc += pj * omega_pow(self.p, (self.p - e * j as u32 % self.p) % self.p);
                }
                acc / C64::new(self.p as f64, 0.0)
            })
            .collect()
    }

    pub fn from_projectors(p: u32, projs: &[Mat]) -> Self {
        let d = projs[0].nrows();
        let mut op = Mat::zeros(d, d);
        for (e, pr) in projs.iter().enumerate() {
            op += pr * omega_pow(p, e as u32);
        }
        Self { p, op }
    }
}

/// POVM Q^a = W_k^{a_k} ... W_1^{a_1} ... W_k^{a_k} over a in Z_p^k.
pub fn joint_refine(obs: &[GenObservable]) -> Vec<(Vec<u32>, Mat)> {
    let Some(first) = obs.first() else { return vec![] };
    let p = first.p;
    let projs: Vec<Vec<Mat>> = obs.iter().map(|o| o.projectors()).collect();
    let k = obs.len();
    let total = (p as usize).pow(k as u32);
    (0..total)
        .map(|idx| {
            let a: Vec<u32> = msd_digits(idx, p as usize, k).into_iter().rev().collect();
            let mut m = projs[0][a[0] as usize].clone();
            for j in 1..k {
                let pj = &projs[j][a[j] as usize];
                m = pj * m * pj;
            }
            (a, m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf::FieldRef;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gf(p: u32, t: u32) -> FieldRef {
        Field::canonical(p, t).unwrap()
    }

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn qubit_paulis() {
        let f = gf(2, 1);
        let x = tau(&f, Basis::X, 1);
        let z = tau(&f, Basis::Z, 1);
        assert!((&x - Mat::from_row_slice(2, 2, &[c(0.), c(1.), c(1.), c(0.)])).norm() < 1e-12);
        assert!((&z - Mat::from_row_slice(2, 2, &[c(1.), c(0.), c(0.), c(-1.)])).norm() < 1e-12);
        assert_abs_diff_eq!((&x * &z + &z * &x).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(tau(&f, Basis::X, 0), identity(2));
    }

    #[test]
    fn twisted_commutation_gf4() {
        let f = gf(2, 2);
        for a in 0..4 {
            for b in 0..4 {
                let lhs = tau(&f, Basis::X, a) * tau(&f, Basis::Z, b);
                let ph = omega_pow(2, (2 - f.trace(f.mul(a, b))) % 2);
                let rhs = tau(&f, Basis::Z, b) * tau(&f, Basis::X, a) * ph;
                assert!((lhs - rhs).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn twisted_commutation_gf9() {
        let f = gf(3, 2);
        for a in 0..9 {
            for b in 0..9 {
                let lhs = tau(&f, Basis::X, a) * tau(&f, Basis::Z, b);
                let ph = omega_pow(3, 3 - f.trace(f.mul(a, b)));
                assert!((lhs - tau(&f, Basis::Z, b) * tau(&f, Basis::X, a) * ph).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn power_identity_exhaustive_gf4() {
        let f = gf(2, 2);
        for w in [Basis::X, Basis::Z] {
            for a in 0..4 {
                let t = tau(&f, w, a);
                assert!(is_unitary(&t, TOL_BUILD));
                assert!((&t * &t - identity(4)).norm() < 1e-12);
                for b in 0..2u32 {
                    let pw = if b == 0 { identity(4) } else { t.clone() };
                    assert!((pw - tau(&f, w, f.mul(a, b))).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn words() {
        let f = gf(2, 1);
        let xx = pauli_word(&f, Basis::X, &[1, 1]).unwrap().to_dense(&f).unwrap();
        assert_eq!(xx, kron(&tau(&f, Basis::X, 1), &tau(&f, Basis::X, 1)));
        assert_eq!(pauli_word(&f, Basis::Z, &[0, 0]).unwrap().to_dense(&f).unwrap(), identity(4));
        assert!(matches!(pauli_word(&f, Basis::Z, &[0; 25]), Err(Error::DimensionCap(_))));
        let g = gf(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a: Vec<Elem> = (0..2).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<Elem> = (0..2).map(|_| rng.gen_range(0..4)).collect();
            let xa = pauli_word(&g, Basis::X, &a).unwrap().to_dense(&g).unwrap();
            let zb = pauli_word(&g, Basis::Z, &b).unwrap().to_dense(&g).unwrap();
            let ph = omega_pow(2, g.tr_dot(&a, &b).unwrap());
            assert!((&xa * &zb - &zb * &xa * ph).norm() < 1e-12);
        }
    }

    #[test]
    fn word_apply_matches_dense() {
        let f = gf(2, 2);
        let psi = epr_state(&f, 2).unwrap();
        let w = pauli_word(&f, Basis::Z, &[3, 1]).unwrap();
        let dense = w.to_dense(&f).unwrap();
        let a = w.apply(&f, &psi, 1);
        let b = psi.apply_local(&dense, 1).unwrap();
        assert!(a.sub(&b).norm() < 1e-12);
    }

    #[test]
    fn sigma_relations_t2() {
        let f = gf(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                let x1 = sigma(&f, Basis::X, 0, a).unwrap();
                let z2 = sigma(&f, Basis::Z, 1, b).unwrap();
                assert!((&x1 * &z2 - &z2 * &x1).norm() < 1e-12);
            }
        }
        for l in 0..2 {
            let x = sigma(&f, Basis::X, l, 1).unwrap();
            let z = sigma(&f, Basis::Z, l, 1).unwrap();
            assert!((&x * &z + &z * &x).norm() < 1e-12);
        }
        assert!(matches!(sigma(&gf(3, 2), Basis::X, 0, 1), Err(Error::NoSelfDualBasis(3, 2))));
    }

    #[test]
    fn fourier_properties() {
        let f = gf(2, 1);
        let h = fourier(&f);
        let s = 1.0 / 2f64.sqrt();
        assert!((h.clone() - Mat::from_row_slice(2, 2, &[c(s), c(s), c(s), c(-s)])).norm() < 1e-12);
        let g = gf(2, 2);
        let fr = fourier(&g);
        assert!(is_unitary(&fr, TOL_BUILD));
        for a in 0..4 {
            let conj = &fr * tau(&g, Basis::Z, a) * fr.adjoint();
            let x = tau(&g, Basis::X, a);
            // F maps Z-eigenvectors onto X-eigenvectors with matching eigenvalue.
            assert!((conj - x).norm() < 1e-12);
        }
        // In self-dual coordinates F factors as f (x) f.
        let mut perm = Mat::zeros(4, 4);
        for j in 0..4u32 {
            let cj = g.coords(j).unwrap();
            perm[(msd_index(&cj, 2), j as usize)] = c(1.0);
        }
        let fact = &perm * &fr * perm.transpose();
        assert!((fact - kron(&h, &h)).norm() < 1e-12);
    }

    #[test]
    fn epr_stabilizers() {
        let f = gf(2, 1);
        let e = epr_state(&f, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(e.amps, vec![c(s), c(0.), c(0.), c(s)]);
        let g = gf(2, 2);
        let psi = epr_state(&g, 1).unwrap();
        assert_abs_diff_eq!(psi.norm(), 1.0, epsilon = 1e-12);
        for a in 0..4 {
            let xx = kron(&tau(&g, Basis::X, a), &tau(&g, Basis::X, a));
            let zz = kron(&tau(&g, Basis::Z, a), &tau(&g, Basis::Z, g.neg(a)));
            assert!(psi.apply_local(&xx, 0).unwrap().sub(&psi).norm() < 1e-12);
            assert!(psi.apply_local(&zz, 0).unwrap().sub(&psi).norm() < 1e-12);
        }
    }

    #[test]
    fn epr_joint_stabilizer_space_is_one_dimensional() {
        for (p, t) in [(2, 1), (2, 2), (3, 1)] {
            let f = gf(p, t);
            let q = f.q() as usize;
            let mut proj = identity(q * q);
            for a in 0..f.q() {
                for w in [Basis::X, Basis::Z] {
                    let b = if w == Basis::X { a } else { f.neg(a) };
                    let s = kron(&tau(&f, w, a), &tau(&f, w, b));
                    let avg = (0..p).fold(Mat::zeros(q * q, q * q), |acc, k| {
                        acc + (0..k).fold(identity(q * q), |m, _| m * &s)
                    }) / c(p as f64);
                    proj = proj * avg;
                }
            }
            let tr: C64 = proj.trace();
            assert_abs_diff_eq!(tr.re, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn basis_measurements_on_epr() {
        let f = gf(2, 2);
        let psi = epr_state(&f, 1).unwrap();
        for w in [Basis::X, Basis::Z] {
            let m = basis_measurement(&f, w, 1).unwrap();
            let pm = m.to_proj();
            pm.validate(TOL_BUILD).unwrap();
            let joint = ProjMeasurement {
                elements: pm
                    .elements
                    .iter()
                    .flat_map(|(la, pa)| pm.elements.iter().map(move |(lb, pb)| ((la[0], lb[0]), kron(pa, pb))))
                    .collect(),
            };
            for ((a, b), pr) in outcome_distribution(&psi, &joint, 0).unwrap() {
                let expect_b = if w == Basis::X { f.neg(a) } else { a };
                let expect = if b == expect_b { 0.25 } else { 0.0 };
                assert_abs_diff_eq!(pr, expect, epsilon = 1e-12);
            }
            let single = outcome_distribution(&psi, &pm, 0).unwrap();
            assert!(single.iter().all(|(_, p)| (p - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn subspace_measurement_partitions() {
        let f = gf(2, 2);
        let inj = CoordInjection::new(2, 2, 1, 4).unwrap();
        let pt = AffineSubspace::point(&f, vec![3]);
        let m = subspace_measurement(&f, Basis::Z, &pt, &inj, 1, false).unwrap();
        for (k, lab) in m.labels.iter().enumerate() {
            let a = msd_digits(k, 4, 2);
            let g = inj.encode(&f, &a).unwrap();
            assert_eq!(lab.poly, MultiPoly::constant(0, g.eval(&f, &[3]).unwrap()));
        }
        let pm = m.to_proj();
        pm.validate(TOL_BUILD).unwrap();
        assert_eq!(pm.elements.len(), 4);
        let line = AffineSubspace::new(&f, vec![0], vec![vec![1]]).unwrap();
        let ml = subspace_measurement(&f, Basis::X, &line, &inj, 1, false).unwrap().to_proj();
        ml.validate(TOL_BUILD).unwrap();
        assert_eq!(ml.elements.len(), 16);
    }

    #[test]
    fn measure_eigenstate_is_deterministic() {
        let f = gf(2, 1);
        let psi = StateVec::basis_state(2, &[1, 0]);
        let pm = basis_measurement(&f, Basis::Z, 1).unwrap().to_proj();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let (l, post) = measure(&psi, &pm, 0, &mut rng).unwrap();
            assert_eq!(l, vec![1]);
            assert!(post.sub(&psi).norm() < 1e-12);
        }
    }

    #[test]
    fn distance_examples() {
        let f = gf(2, 1);
        let x = tau(&f, Basis::X, 1);
        let z = tau(&f, Basis::Z, 1);
        let psi = StateVec::basis_state(2, &[0, 1]);
        assert_abs_diff_eq!(state_dep_dist(&x, &z, &psi).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(state_dep_dist(&x, &x, &psi).unwrap(), 0.0, epsilon = 1e-12);
        assert!(state_dep_dist(&x, &identity(4), &psi).is_err());
    }

    #[test]
    fn rounding_examples() {
        let f = gf(2, 1);
        let z = tau(&f, Basis::Z, 1);
        let b = &z * C64::from_polar(1.0, 0.1);
        let u = round_to_roots(&b, 2).unwrap();
        assert!((u - &z).norm() < 1e-9);
        let x = tau(&f, Basis::X, 1);
        assert!((round_to_roots(&x, 2).unwrap() - &x).norm() < 1e-9);
        let nn = Mat::from_row_slice(2, 2, &[c(1.), c(1.), c(0.), c(1.)]);
        assert!(matches!(round_to_roots(&nn, 2), Err(Error::NotNormal(_))));
    }

    #[test]
    fn joint_refinement() {
        let f = gf(2, 1);
        let z = GenObservable::new(2, tau(&f, Basis::Z, 1)).unwrap();
        let single = joint_refine(std::slice::from_ref(&z));
        assert_eq!(single.len(), 2);
        assert!((single[0].1.clone() - z.projectors()[0].clone()).norm() < 1e-12);
        let zz = GenObservable::new(2, kron(&tau(&f, Basis::Z, 1), &identity(2))).unwrap();
        let iz = GenObservable::new(2, kron(&identity(2), &tau(&f, Basis::Z, 1))).unwrap();
        let q = joint_refine(&[zz, iz]);
        for (a, m) in &q {
            let mut expect = Mat::zeros(4, 4);
            expect[(msd_index(&[a[0], a[1]], 2), msd_index(&[a[0], a[1]], 2))] = c(1.0);
            assert!((m - expect).norm() < 1e-12);
        }
        let x = GenObservable::new(2, tau(&f, Basis::X, 1)).unwrap();
        let q = joint_refine(&[x.clone(), z.clone()]);
        let sum = q.iter().fold(Mat::zeros(2, 2), |acc, (_, m)| acc + m);
        assert!((sum - identity(2)).norm() < 1e-12);
        // Residual against the X marginal on |0><0| (x) EPR-like witness.
        let psi = StateVec::basis_state(2, &[0]);
        let xp = x.projectors();
        let resid: f64 = q
            .iter()
            .map(|(a, m)| {
                let other = &xp[(1 - a[0]) as usize];
                let v = psi.apply_local(&(other * m), 0).unwrap();
                v.inner(&v).re.max(0.0) + psi.inner(&psi.apply_local(&(m * other), 0).unwrap()).re.abs()
            })
            .sum();
        assert!(resid > 0.0);
    }

    #[test]
    fn state_bytes_round_trip() {
        let f = gf(2, 1);
        let psi = epr_state(&f, 1).unwrap();
        let b = psi.to_bytes();
        assert_eq!(b.len(), 24 + 4 * 16);
        assert_eq!(StateVec::from_bytes(&b).unwrap(), psi);
        assert_eq!(mat_to_bytes(&identity(2)).len(), 24 + 4 * 16);
    }

    fn random_unitary(rng: &mut ChaCha8Rng, d: usize) -> Mat {
        let g = Mat::from_fn(d, d, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let (qm, _) = g.qr().unpack();
        qm
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn rounding_bound(seed in 0u64..1_000_000, s in 2u32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let u = random_unitary(&mut rng, d);
            let mut diag = Mat::zeros(d, d);
            for k in 0..d {
                let r = 0.7 + 0.6 * rng.gen::<f64>();
                diag[(k, k)] = C64::from_polar(r, 2.0 * PI * rng.gen::<f64>());
            }
            let b = &u * diag * u.adjoint();
            let psi_amps: Vec<C64> = (0..d).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
            let nrm = psi_amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let psi = StateVec { q: 4, sites: 1, amps: psi_amps.iter().map(|a| a / nrm).collect() };
            let rounded = round_to_roots(&b, s).unwrap();
            let mut bs = identity(d);
            for _ in 0..s { bs = &bs * &b; }
            let lhs = psi.apply_local(&(&b - &rounded), 0).unwrap().norm().powi(2);
            let rhs = 4.0 * psi.apply_local(&(bs - identity(d)), 0).unwrap().norm().powi(2);
            prop_assert!(lhs <= rhs + 1e-9);
            let mut us = identity(d);
            for _ in 0..s { us = &us * &rounded; }
            prop_assert!((us - identity(d)).norm() < 1e-8);
        }
    }
}
