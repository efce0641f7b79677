//! Reed–Muller style encodings over GF(q)^m: the coordinate-expansion map,
//! sparse multivariate polynomials, affine subspaces and curves.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::{Elem, Field};

/// Injection of {0..n-1} into {0..h-1}^m via base-h digits, padded to m.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordInjection {
    pub n: usize,
    pub h: u32,
    pub m: usize,
    pub table: Vec<Vec<Elem>>,
}

impl CoordInjection {
    pub fn new(n: usize, h: u32, m: usize, q: u32) -> Result<Self> {
        if h < 1 || h > q {
            return Err(Error::InvalidParam(format!("need 1 <= h <= q, got h = {h}, q = {q}")));
        }
        if (h as u128).pow(m as u32) < n as u128 {
            return Err(Error::InvalidParam(format!("h^m = {h}^{m} < n = {n}")));
        }
        let table = (0..n)
            .map(|i| {
                let mut r = i as u32;
                (0..m)
                    .map(|_| {
                        let d = if h == 1 { 0 } else { r % h };
                        r = if h == 1 { 0 } else { r / h };
                        d
                    })
                    .collect()
            })
            .collect();
        Ok(Self { n, h, m, table })
    }

    /// Evaluation points used for the digit k < h.
    fn node(k: u32) -> Elem {
        k
    }

    /// Values of the h univariate Lagrange indicators at y.
    fn indicators(&self, f: &Field, y: Elem) -> Vec<Elem> {
        (0..self.h)
            .map(|c| {
                let mut num = 1;
                let mut den = 1;
                for k in (0..self.h).filter(|&k| k != c) {
                    num = f.mul(num, f.sub(Self::node(k), y));
                    den = f.mul(den, f.sub(Self::node(k), Self::node(c)));
                }
                f.mul(num, f.inv(den).expect("distinct nodes"))
            })
            .collect()
    }

    /// x_pi: component i is the Lagrange indicator of pi(i) evaluated at x.
    pub fn expand(&self, f: &Field, x: &[Elem]) -> Result<Vec<Elem>> {
        if x.len() != self.m {
            return Err(Error::DimensionMismatch(format!("point has {} coords, m = {}", x.len(), self.m)));
        }
        let ind: Vec<Vec<Elem>> = x.iter().map(|&y| self.indicators(f, y)).collect();
        Ok(self
            .table
            .iter()
            .map(|pi| pi.iter().enumerate().fold(1, |acc, (j, &c)| f.mul(acc, ind[j][c as usize])))
            .collect())
    }

    /// Low-degree encoding g_a with per-variable degree <= h-1.
    pub fn encode(&self, f: &Field, a: &[Elem]) -> Result<MultiPoly> {
        if a.len() != self.n {
            return Err(Error::LengthMismatch(a.len(), self.n));
        }
        let uni: Vec<Vec<Elem>> = (0..self.h).map(|c| self.indicator_poly(f, c)).collect();
        let mut g = MultiPoly::zero(self.m);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0 {
                continue;
            }
            let mut term = MultiPoly::constant(self.m, ai);
            for (j, &c) in self.table[i].iter().enumerate() {
                term = term.mul(f, &MultiPoly::univariate(self.m, j, &uni[c as usize]));
            }
            g = g.add(f, &term);
        }
        Ok(g)
    }

    fn indicator_poly(&self, f: &Field, c: u32) -> Vec<Elem> {
        let mut poly = vec![1];
        let mut den = 1;
        for k in (0..self.h).filter(|&k| k != c) {
            // multiply by (k - y)
            let mut next = vec![0; poly.len() + 1];
            for (e, &co) in poly.iter().enumerate() {
                next[e] = f.add(next[e], f.mul(co, Self::node(k)));
                next[e + 1] = f.sub(next[e + 1], co);
            }
            poly = next;
            den = f.mul(den, f.sub(Self::node(k), Self::node(c)));
        }
        let dinv = f.inv(den).expect("distinct nodes");
        poly.iter().map(|&co| f.mul(co, dinv)).collect()
    }
}

/// Sparse polynomial over GF(q); zero coefficients are never stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "PolyRepr", from = "PolyRepr")]
pub struct MultiPoly {
    pub num_vars: usize,
    pub terms: BTreeMap<Vec<u32>, Elem>,
}

#[derive(Serialize, Deserialize)]
struct PolyRepr {
    vars: usize,
    terms: Vec<(Vec<u32>, Elem)>,
}

impl From<MultiPoly> for PolyRepr {
    fn from(p: MultiPoly) -> Self {
        PolyRepr { vars: p.num_vars, terms: p.terms.into_iter().collect() }
    }
}

impl From<PolyRepr> for MultiPoly {
    fn from(r: PolyRepr) -> Self {
        MultiPoly { num_vars: r.vars, terms: r.terms.into_iter().filter(|(_, c)| *c != 0).collect() }
    }
}

impl MultiPoly {
    pub fn zero(num_vars: usize) -> Self {
        Self { num_vars, terms: BTreeMap::new() }
    }

    pub fn constant(num_vars: usize, c: Elem) -> Self {
        let mut p = Self::zero(num_vars);
        if c != 0 {
            p.terms.insert(vec![0; num_vars], c);
        }
        p
    }

    pub fn var(num_vars: usize, j: usize) -> Self {
        let mut e = vec![0; num_vars];
        e[j] = 1;
        let mut p = Self::zero(num_vars);
        p.terms.insert(e, 1);
        p
    }

    /// Polynomial in variable j with the given coefficients (constant first).
    pub fn univariate(num_vars: usize, j: usize, coeffs: &[Elem]) -> Self {
        let mut p = Self::zero(num_vars);
        for (k, &c) in coeffs.iter().enumerate() {
            if c != 0 {
                let mut e = vec![0; num_vars];
                e[j] = k as u32;
                p.terms.insert(e, c);
            }
        }
        p
    }

    pub fn from_terms(f: &Field, num_vars: usize, terms: impl IntoIterator<Item = (Vec<u32>, Elem)>) -> Result<Self> {
        let mut p = Self::zero(num_vars);
        for (e, c) in terms {
            if e.len() != num_vars {
                return Err(Error::DimensionMismatch(format!("exponent {e:?} for {num_vars} vars")));
            }
            p.add_term(f, e, c);
        }
        Ok(p)
    }

    fn add_term(&mut self, f: &Field, e: Vec<u32>, c: Elem) {
        if c == 0 {
            return;
        }
        let v = self.terms.entry(e.clone()).or_insert(0);
        *v = f.add(*v, c);
        if *v == 0 {
            self.terms.remove(&e);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn var_degree(&self, j: usize) -> u32 {
        self.terms.keys().map(|e| e[j]).max().unwrap_or(0)
    }

    pub fn add(&self, f: &Field, o: &Self) -> Self {
        let mut r = self.clone();
        for (e, &c) in &o.terms {
            r.add_term(f, e.clone(), c);
        }
        r
    }

    pub fn sub(&self, f: &Field, o: &Self) -> Self {
        self.add(f, &o.scale(f, f.neg(1)))
    }

    pub fn scale(&self, f: &Field, c: Elem) -> Self {
        let mut r = Self::zero(self.num_vars);
        for (e, &x) in &self.terms {
            r.add_term(f, e.clone(), f.mul(c, x));
        }
        r
    }

    pub fn mul(&self, f: &Field, o: &Self) -> Self {
        let mut r = Self::zero(self.num_vars);
        for (e1, &c1) in &self.terms {
            for (e2, &c2) in &o.terms {
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                r.add_term(f, e, f.mul(c1, c2));
            }
        }
        r
    }

    pub fn eval(&self, f: &Field, x: &[Elem]) -> Result<Elem> {
        if x.len() != self.num_vars {
            return Err(Error::DimensionMismatch(format!("{} values for {} vars", x.len(), self.num_vars)));
        }
        Ok(self.eval_unchecked(f, x))
    }

    pub fn eval_unchecked(&self, f: &Field, x: &[Elem]) -> Elem {
        self.terms.iter().fold(0, |acc, (e, &c)| {
            let mono = e.iter().zip(x).fold(c, |m, (&k, &xv)| f.mul(m, f.pow(xv, k as u64)));
            f.add(acc, mono)
        })
    }

    /// Substitutes variable j by subs[j] (all in a common set of new variables).
    pub fn compose(&self, f: &Field, subs: &[MultiPoly]) -> Result<MultiPoly> {
        if subs.len() != self.num_vars {
            return Err(Error::DimensionMismatch(format!("{} substitutions for {} vars", subs.len(), self.num_vars)));
        }
        let nv = subs.first().map(|s| s.num_vars).unwrap_or(0);
        let mut powers: Vec<Vec<MultiPoly>> = subs.iter().map(|s| vec![MultiPoly::constant(nv, 1), s.clone()]).collect();
        let mut out = MultiPoly::zero(nv);
        for (e, &c) in &self.terms {
            let mut term = MultiPoly::constant(nv, c);
            for (j, &k) in e.iter().enumerate() {
                while powers[j].len() <= k as usize {
                    let next = powers[j].last().unwrap().mul(f, &subs[j]);
                    powers[j].push(next);
                }
                term = term.mul(f, &powers[j][k as usize]);
            }
            out = out.add(f, &term);
        }
        Ok(out)
    }
}

/// Affine subspace of dimension 0, 1 or 2 in canonical form: reduced-echelon
/// basis rows and a base point vanishing on the pivot coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AffineSubspace {
    pub base: Vec<Elem>,
    pub basis: Vec<Vec<Elem>>,
}

/// Reduced row echelon form; returns the independent rows and their pivots.
pub fn rref(f: &Field, rows: &[Vec<Elem>]) -> (Vec<Vec<Elem>>, Vec<usize>) {
    let mut rows: Vec<Vec<Elem>> = rows.to_vec();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut pivots = vec![];
    let mut r = 0;
    for c in 0..ncols {
        let Some(pr) = (r..rows.len()).find(|&i| rows[i][c] != 0) else { continue };
        rows.swap(r, pr);
        let inv = f.inv(rows[r][c]).unwrap();
        rows[r] = f.scale_vec(inv, &rows[r]);
        for i in 0..rows.len() {
            if i != r && rows[i][c] != 0 {
                let factor = rows[i][c];
                let sub = f.scale_vec(factor, &rows[r]);
                rows[i] = f.sub_vec(&rows[i], &sub);
            }
        }
        pivots.push(c);
        r += 1;
    }
    rows.truncate(r);
    (rows, pivots)
}

impl AffineSubspace {
    pub fn new(f: &Field, base: Vec<Elem>, basis: Vec<Vec<Elem>>) -> Result<Self> {
        if basis.len() > 2 {
            return Err(Error::InvalidParam("subspace dimension above 2".into()));
        }
        if basis.iter().any(|b| b.len() != base.len()) {
            return Err(Error::DimensionMismatch("basis vector length differs from base".into()));
        }
        let (red, pivots) = rref(f, &basis);
        if red.len() != basis.len() {
            return Err(Error::InvalidParam("basis vectors are linearly dependent".into()));
        }
        let mut base = base;
        for (row, &pc) in red.iter().zip(&pivots) {
            let c = base[pc];
            if c != 0 {
                base = f.sub_vec(&base, &f.scale_vec(c, row));
            }
        }
        Ok(Self { base, basis: red })
    }

    pub fn point(f: &Field, w: Vec<Elem>) -> Self {
        Self::new(f, w, vec![]).expect("point")
    }

    pub fn ambient(&self) -> usize {
        self.base.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    fn pivots(&self) -> Vec<usize> {
        self.basis.iter().map(|r| r.iter().position(|&x| x != 0).unwrap()).collect()
    }

    pub fn at(&self, f: &Field, lambda: &[Elem]) -> Vec<Elem> {
        let mut x = self.base.clone();
        for (l, b) in lambda.iter().zip(&self.basis) {
            x = f.add_vec(&x, &f.scale_vec(*l, b));
        }
        x
    }

    /// Parameters of w if it lies in the subspace.
    pub fn params_of(&self, f: &Field, w: &[Elem]) -> Option<Vec<Elem>> {
        if w.len() != self.ambient() {
            return None;
        }
        let diff = f.sub_vec(w, &self.base);
        let lambda: Vec<Elem> = self.pivots().iter().map(|&pc| diff[pc]).collect();
        (self.at(f, &lambda) == w).then_some(lambda)
    }

    pub fn contains(&self, f: &Field, w: &[Elem]) -> bool {
        self.params_of(f, w).is_some()
    }

    /// Coordinates as linear polynomials in the parameters.
    pub fn param_polys(&self, f: &Field) -> Vec<MultiPoly> {
        let k = self.dim();
        (0..self.ambient())
            .map(|j| {
                let mut p = MultiPoly::constant(k, self.base[j]);
                for (l, b) in self.basis.iter().enumerate() {
                    p = p.add(f, &MultiPoly::var(k, l).scale(f, b[j]));
                }
                p
            })
            .collect()
    }

    pub fn points(&self, f: &Field) -> Vec<Vec<Elem>> {
        let k = self.dim();
        (0..(f.q() as usize).pow(k as u32)).map(|i| self.at(f, &f.vec_from_index(i, k))).collect()
    }

    /// All affine planes of GF(q)^m in canonical form.
    pub fn all_planes(f: &Field, m: usize) -> Vec<AffineSubspace> {
        let q = f.q() as usize;
        let mut spans = std::collections::BTreeSet::new();
        for i in 0..q.pow(m as u32) {
            for j in 0..q.pow(m as u32) {
                let (r, _) = rref(f, &[f.vec_from_index(i, m), f.vec_from_index(j, m)]);
                if r.len() == 2 {
                    spans.insert(r);
                }
            }
        }
        let mut out = vec![];
        for span in spans {
            let sub = AffineSubspace { base: vec![0; m], basis: span };
            let piv = sub.pivots();
            let free: Vec<usize> = (0..m).filter(|c| !piv.contains(c)).collect();
            for i in 0..q.pow(free.len() as u32) {
                let vals = f.vec_from_index(i, free.len());
                let mut base = vec![0; m];
                for (c, v) in free.iter().zip(vals) {
                    base[*c] = v;
                }
                out.push(AffineSubspace { base, basis: sub.basis.clone() });
            }
        }
        out
    }
}

/// Parametric curve t -> (c_1(t), ..., c_m(t)) with univariate components.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Curve {
    pub components: Vec<Vec<Elem>>,
    pub degree: usize,
}

impl Curve {
    pub fn at(&self, f: &Field, t: Elem) -> Vec<Elem> {
        self.components.iter().map(|c| eval_uni(f, c, t)).collect()
    }

    pub fn param_polys(&self) -> Vec<MultiPoly> {
        self.components.iter().map(|c| MultiPoly::univariate(1, 0, c)).collect()
    }
}

pub fn eval_uni(f: &Field, c: &[Elem], t: Elem) -> Elem {
    c.iter().rev().fold(0, |acc, &x| f.add(f.mul(acc, t), x))
}

/// Curve through the given points at parameters 0, 1, ..., l-1 (element indices).
pub fn curve_through(f: &Field, points: &[Vec<Elem>]) -> Result<Curve> {
    let l = points.len();
    if l > f.q() as usize {
        return Err(Error::TooManyPoints { points: l, q: f.q() });
    }
    if l == 0 {
        return Err(Error::InvalidParam("no points".into()));
    }
    let m = points[0].len();
    if points.iter().any(|p| p.len() != m) {
        return Err(Error::DimensionMismatch("points of different lengths".into()));
    }
    let nodes: Vec<Elem> = (0..l as u32).collect();
    let mut comps = vec![vec![0; l]; m];
    for (i, pt) in points.iter().enumerate() {
        let mut basis = vec![1];
        let mut den = 1;
        for (k, &nk) in nodes.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut next = vec![0; basis.len() + 1];
            for (e, &c) in basis.iter().enumerate() {
                next[e + 1] = f.add(next[e + 1], c);
                next[e] = f.sub(next[e], f.mul(c, nk));
            }
            basis = next;
            den = f.mul(den, f.sub(nodes[i], nk));
        }
        let dinv = f.inv(den)?;
        for j in 0..m {
            let s = f.mul(pt[j], dinv);
            for (e, &c) in basis.iter().enumerate() {
                comps[j][e] = f.add(comps[j][e], f.mul(s, c));
            }
        }
    }
    Ok(Curve { components: comps, degree: l - 1 })
}

/// Restriction target for a polynomial.
#[derive(Clone, Debug)]
pub enum Domain<'a> {
    Subspace(&'a AffineSubspace),
    Curve(&'a Curve),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RestrictedPoly {
    pub poly: MultiPoly,
}

pub fn restrict(f: &Field, g: &MultiPoly, dom: Domain<'_>) -> Result<RestrictedPoly> {
    let subs = match dom {
        Domain::Subspace(s) => {
            if s.ambient() != g.num_vars {
                return Err(Error::DimensionMismatch(format!("subspace in dim {}, poly in {}", s.ambient(), g.num_vars)));
            }
            s.param_polys(f)
        }
        Domain::Curve(c) => {
            if c.components.len() != g.num_vars {
                return Err(Error::DimensionMismatch(format!("curve in dim {}, poly in {}", c.components.len(), g.num_vars)));
            }
            c.param_polys()
        }
    };
    if subs.is_empty() {
        return Ok(RestrictedPoly { poly: MultiPoly::constant(0, g.eval_unchecked(f, &[])) });
    }
    Ok(RestrictedPoly { poly: g.compose(f, &subs)? })
}

/// Uniform affine plane and a uniform point in it.
pub fn sample_plane_point<R: Rng + ?Sized>(f: &Field, rng: &mut R, m: usize) -> Result<(AffineSubspace, Vec<Elem>)> {
    if m < 2 {
        return Err(Error::InvalidParam("planes need m >= 2".into()));
    }
    let q = f.q();
    let rv = |rng: &mut R| (0..m).map(|_| rng.gen_range(0..q)).collect::<Vec<_>>();
    loop {
        let (v1, v2) = (rv(rng), rv(rng));
        if rref(f, &[v1.clone(), v2.clone()]).0.len() < 2 {
            continue;
        }
        let base = rv(rng);
        let s = AffineSubspace::new(f, base, vec![v1, v2])?;
        let lambda = [rng.gen_range(0..q), rng.gen_range(0..q)];
        let w = s.at(f, &lambda);
        return Ok((s, w));
    }
}

/// Number of zeros of g over GF(q)^m by exhaustive evaluation (q^m <= 2^20).
pub fn count_zeros(f: &Field, g: &MultiPoly) -> Result<usize> {
    if g.is_zero() {
        return Err(Error::ZeroPolynomial);
    }
    let total = (f.q() as u64).pow(g.num_vars as u32);
    if total > 1 << 20 {
        return Err(Error::DimensionCap(format!("q^m = {total} > 2^20")));
    }
    Ok((0..total as usize)
        .filter(|&i| g.eval_unchecked(f, &f.vec_from_index(i, g.num_vars)) == 0)
        .count())
}

/// Entries x^(2^i) for i < ceil(log2(d+1)).
pub fn subst_map(f: &Field, x: Elem, d: u32) -> Vec<Elem> {
    let mu = subst_len(d);
    let mut out = Vec::with_capacity(mu);
    let mut y = x;
    for _ in 0..mu {
        out.push(y);
        y = f.mul(y, y);
    }
    out
}

pub fn subst_len(d: u32) -> usize {
    (32 - d.leading_zeros()) as usize
}

/// Rewrites a univariate polynomial of degree <= d as a multilinear one in
/// the substituted variables, x^k mapping to the product of v_i over set bits of k.
pub fn rewrite_univariate(f: &Field, coeffs: &[Elem], d: u32) -> Result<MultiPoly> {
    if coeffs.len() > d as usize + 1 && coeffs[d as usize + 1..].iter().any(|&c| c != 0) {
        return Err(Error::InvalidParam(format!("degree exceeds {d}")));
    }
    let mu = subst_len(d);
    let mut p = MultiPoly::zero(mu);
    for (k, &c) in coeffs.iter().enumerate() {
        let e: Vec<u32> = (0..mu).map(|i| ((k >> i) & 1) as u32).collect();
        p.add_term(f, e, c);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf::FieldRef;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gf4() -> FieldRef {
        Field::canonical(2, 2).unwrap()
    }

    #[test]
    fn injection_digits() {
        let inj = CoordInjection::new(4, 2, 2, 2).unwrap();
        assert_eq!(inj.table, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]]);
        assert!(CoordInjection::new(5, 2, 2, 2).is_err());
    }

    #[test]
    fn expand_is_indicator_on_grid() {
        let f = gf4();
        let inj = CoordInjection::new(7, 3, 2, 4).unwrap();
        for i in 0..7 {
            let x = inj.table[i].clone();
            let e = inj.expand(&f, &x).unwrap();
            for j in 0..7 {
                assert_eq!(e[j], (i == j) as u32);
            }
        }
    }

    #[test]
    fn expand_matches_product_formula_gf4() {
        // Oracle for h = 2 with nodes {0, 1}: L_0(y) = 1 - y = 1 + y, L_1(y) = y.
        let f = gf4();
        let inj = CoordInjection::new(4, 2, 2, 4).unwrap();
        let w = 2;
        let x = vec![w, w];
        let l0 = f.add(1, w);
        let l1 = w;
        let expect = vec![f.mul(l0, l0), f.mul(l1, l0), f.mul(l0, l1), f.mul(l1, l1)];
        assert_eq!(inj.expand(&f, &x).unwrap(), expect);
    }

    #[test]
    fn interpolation_identity_exhaustive() {
        let f = gf4();
        let inj = CoordInjection::new(6, 3, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a: Vec<Elem> = (0..6).map(|_| rng.gen_range(0..4)).collect();
            let g = inj.encode(&f, &a).unwrap();
            for j in 0..2 {
                assert!(g.var_degree(j) <= 2);
            }
            for i in 0..16 {
                let x = f.vec_from_index(i, 2);
                let xp = inj.expand(&f, &x).unwrap();
                assert_eq!(g.eval(&f, &x).unwrap(), f.vec_dot(&a, &xp).unwrap());
            }
            for i in 0..6 {
                assert_eq!(g.eval(&f, &inj.table[i]).unwrap(), a[i]);
            }
        }
        assert!(inj.encode(&f, &[0; 6]).unwrap().is_zero());
    }

    #[test]
    fn eval_examples() {
        let f = gf4();
        let g = MultiPoly::univariate(1, 0, &[0, 1, 1]);
        assert_eq!(g.eval(&f, &[2]).unwrap(), 1);
        assert_eq!(MultiPoly::constant(2, 3).eval(&f, &[1, 2]).unwrap(), 3);
        assert!(matches!(g.eval(&f, &[1, 2]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn subspace_canonical_and_membership() {
        let f = gf4();
        let s1 = AffineSubspace::new(&f, vec![1, 2, 3], vec![vec![2, 0, 1]]).unwrap();
        let s2 = AffineSubspace::new(&f, f.add_vec(&[1, 2, 3], &[3, 0, f.mul(3, f.inv(2).unwrap())]), vec![vec![1, 0, f.inv(2).unwrap()]]).unwrap();
        assert_eq!(s1, s2);
        for lam in 0..4 {
            let x = s1.at(&f, &[lam]);
            assert_eq!(s1.params_of(&f, &x), Some(vec![lam]));
        }
        assert!(s1.contains(&f, &[3, 2, 2]));
        assert!(!s1.contains(&f, &[1, 2, 2]));
        assert!(AffineSubspace::new(&f, vec![0, 0], vec![vec![1, 1], vec![2, 2]]).is_err());
    }

    #[test]
    fn restrict_examples() {
        let f = gf4();
        let inj = CoordInjection::new(4, 2, 2, 4).unwrap();
        let g = inj.encode(&f, &[1, 2, 3, 1]).unwrap();
        let pt = AffineSubspace::point(&f, vec![2, 3]);
        let r = restrict(&f, &g, Domain::Subspace(&pt)).unwrap();
        assert_eq!(r.poly, MultiPoly::constant(0, g.eval(&f, &[2, 3]).unwrap()));
        let line = AffineSubspace::new(&f, vec![1, 0], vec![vec![2, 1]]).unwrap();
        let r = restrict(&f, &g, Domain::Subspace(&line)).unwrap();
        for lam in [0, 2, 3] {
            assert_eq!(r.poly.eval(&f, &[lam]).unwrap(), g.eval(&f, &line.at(&f, &[lam])).unwrap());
        }
        let c = curve_through(&f, &[vec![1, 2], vec![3, 3], vec![0, 1]]).unwrap();
        let rc = restrict(&f, &g, Domain::Curve(&c)).unwrap();
        assert!(rc.poly.total_degree() as usize <= g.total_degree() as usize * c.degree);
        assert!(matches!(restrict(&f, &g, Domain::Subspace(&AffineSubspace::point(&f, vec![1]))), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn plane_sampling() {
        let f = gf4();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let whole = AffineSubspace::all_planes(&f, 2);
        assert_eq!(whole.len(), 1);
        for _ in 0..50 {
            let (s, w) = sample_plane_point(&f, &mut rng, 2).unwrap();
            assert_eq!(s, whole[0]);
            assert!(s.contains(&f, &w));
        }
        assert!(sample_plane_point(&f, &mut rng, 1).is_err());
    }

    #[test]
    fn plane_frequencies_uniform_chi2() {
        let f = gf4();
        let planes = AffineSubspace::all_planes(&f, 3);
        // 21 two-dimensional subspaces of GF(4)^3, 4 cosets each.
        assert_eq!(planes.len(), 84);
        let index: std::collections::HashMap<_, _> = planes.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let mut counts = vec![0f64; planes.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        for _ in 0..draws {
            let (s, w) = sample_plane_point(&f, &mut rng, 3).unwrap();
            assert!(s.contains(&f, &w));
            counts[index[&s]] += 1.0;
        }
        let e = draws as f64 / planes.len() as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 83 degrees of freedom; 99.9th percentile is about 125.
        assert!(chi2 < 125.0, "chi2 = {chi2}");
    }

    #[test]
    fn zero_counts() {
        let f = gf4();
        let x1 = MultiPoly::var(2, 0);
        assert_eq!(count_zeros(&f, &x1).unwrap(), 4);
        assert_eq!(count_zeros(&f, &MultiPoly::constant(2, 1)).unwrap(), 0);
        assert!(matches!(count_zeros(&f, &MultiPoly::zero(2)), Err(Error::ZeroPolynomial)));
        for d in 1..=4u32 {
            let mut g = MultiPoly::constant(2, 1);
            for c in 0..d {
                g = g.mul(&f, &MultiPoly::univariate(2, 0, &[c, 1]));
            }
            assert_eq!(count_zeros(&f, &g).unwrap(), (d * 4) as usize);
        }
    }

    #[test]
    fn subst_examples() {
        let f = Field::canonical(2, 4).unwrap();
        assert_eq!(subst_map(&f, 5, 1), vec![5]);
        let v = subst_map(&f, 5, 4);
        assert_eq!(v, vec![5, f.pow(5, 2), f.pow(5, 4)]);
        let x3 = rewrite_univariate(&f, &[0, 0, 0, 1], 4).unwrap();
        assert_eq!(x3.terms.keys().collect::<Vec<_>>(), vec![&vec![1, 1, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs: Vec<Elem> = (0..6).map(|_| rng.gen_range(0..16)).collect();
        let rw = rewrite_univariate(&f, &coeffs, 5).unwrap();
        for _ in 0..100 {
            let x = rng.gen_range(0..16);
            assert_eq!(rw.eval(&f, &subst_map(&f, x, 5)).unwrap(), eval_uni(&f, &coeffs, x));
        }
    }

    #[test]
    fn curves() {
        let f = gf4();
        let c = curve_through(&f, &[vec![1, 2]]).unwrap();
        assert_eq!(c.degree, 0);
        assert_eq!(c.at(&f, 3), vec![1, 2]);
        let pts = vec![vec![1, 2], vec![3, 0], vec![2, 2]];
        let c = curve_through(&f, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(&c.at(&f, i as u32), p);
        }
        let line = curve_through(&f, &pts[..2]).unwrap();
        assert_eq!(line.degree, 1);
        assert!(line.components.iter().all(|co| co.len() == 2));
        assert!(matches!(curve_through(&f, &vec![vec![0, 0]; 5]), Err(Error::TooManyPoints { .. })));
    }

    proptest! {
        #[test]
        fn restriction_commutes_with_eval(a in proptest::collection::vec(0u32..4, 4), b in proptest::collection::vec(0u32..4, 2), v1 in proptest::collection::vec(0u32..4, 2), lam in proptest::collection::vec(0u32..4, 2)) {
            let f = gf4();
            let inj = CoordInjection::new(4, 2, 2, 4).unwrap();
            let g = inj.encode(&f, &a).unwrap();
            prop_assume!(v1.iter().any(|&x| x != 0));
            let line = AffineSubspace::new(&f, b, vec![v1]).unwrap();
            let r = restrict(&f, &g, Domain::Subspace(&line)).unwrap();
            prop_assert_eq!(r.poly.eval(&f, &lam[..1]).unwrap(), g.eval(&f, &line.at(&f, &lam[..1])).unwrap());
        }

        #[test]
        fn distinct_low_degree_polys_agree_rarely(c1 in proptest::collection::vec(0u32..4, 6), c2 in proptest::collection::vec(0u32..4, 6)) {
            let f = gf4();
            let exps = [vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]];
            let g1 = MultiPoly::from_terms(&f, 2, exps.iter().cloned().zip(c1)).unwrap();
            let g2 = MultiPoly::from_terms(&f, 2, exps.iter().cloned().zip(c2)).unwrap();
            let diff = g1.sub(&f, &g2);
            prop_assume!(!diff.is_zero());
            let d = diff.total_degree() as usize;
            prop_assert!(count_zeros(&f, &diff).unwrap() <= d * 4);
        }
    }
}
