//! Arithmetic in GF(p^t), the absolute trace, and self-dual bases.
//!
//! Elements are packed as integers: the p-ary digits of the index are the
//! coefficients in the power basis of the modulus, lowest power first. Hot
//! paths across the crate work on these raw indices through a shared [`Field`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw element index; digits base p are power-basis coefficients.
pub type Elem = u32;

const Q_CAP: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub p: u32,
    pub t: u32,
    /// Monic modulus, t+1 digits, constant term first.
    pub modulus: Vec<u32>,
}

fn is_prime(p: u32) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| p % d != 0)
}

impl FieldSpec {
    /// Table-backed modulus for p in {2, 3} and t <= 6; t = 1 works for any prime.
    pub fn canonical(p: u32, t: u32) -> Result<Self> {
        let modulus: Vec<u32> = match (p, t) {
            (_, 1) => vec![0, 1],
            (2, 2) => vec![1, 1, 1],
            (2, 3) => vec![1, 1, 0, 1],
            (2, 4) => vec![1, 1, 0, 0, 1],
            (2, 5) => vec![1, 0, 1, 0, 0, 1],
            (2, 6) => vec![1, 1, 0, 0, 0, 0, 1],
            (3, 2) => vec![1, 0, 1],
            (3, 3) => vec![1, 2, 0, 1],
            (3, 4) => vec![2, 1, 0, 0, 1],
            (3, 5) => vec![1, 2, 0, 0, 0, 1],
            (3, 6) => vec![2, 2, 1, 0, 2, 0, 1],
            _ => return Err(Error::NoModulus(p, t)),
        };
        Self::with_modulus(p, modulus)
    }

    pub fn with_modulus(p: u32, modulus: Vec<u32>) -> Result<Self> {
        if !is_prime(p) {
            return Err(Error::InvalidParam(format!("{p} is not prime")));
        }
        if modulus.len() < 2 || *modulus.last().unwrap() != 1 || modulus.iter().any(|&c| c >= p) {
            return Err(Error::InvalidParam("modulus must be monic with digits < p".into()));
        }
        let t = (modulus.len() - 1) as u32;
        let q = (p as u64).checked_pow(t).unwrap_or(u64::MAX);
        if q > Q_CAP {
            return Err(Error::FieldTooLarge(q));
        }
        if !irreducible(p, &modulus) {
            return Err(Error::NotIrreducible(t, p));
        }
        Ok(Self { p, t, modulus })
    }

    pub fn q(&self) -> u32 {
        self.p.pow(self.t)
    }
}

/// Remainder of `a` modulo monic `m` over Z_p, digits low first.
fn poly_rem(p: u32, a: &[u32], m: &[u32]) -> Vec<u32> {
    let mut r = a.to_vec();
    let dm = m.len() - 1;
    while r.len() > dm {
        let lead = r.pop().unwrap();
        if lead != 0 {
            let off = r.len() - dm;
            for (i, &c) in m[..dm].iter().enumerate() {
                r[off + i] = (r[off + i] + (p - lead) * c % p) % p;
            }
        }
    }
    r
}

/// Trial division by every monic polynomial of degree <= t/2.
fn irreducible(p: u32, m: &[u32]) -> bool {
    let t = m.len() - 1;
    for deg in 1..=t / 2 {
        let count = p.pow(deg as u32);
        for low in 0..count {
            let mut div: Vec<u32> = (0..deg).map(|i| low / p.pow(i as u32) % p).collect();
            div.push(1);
            if poly_rem(p, m, &div).iter().all(|&c| c == 0) {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfDualBasis {
    pub basis: Vec<Elem>,
}

/// Field element tagged with its (p, t), for the checked arithmetic API.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldElement {
    pub p: u32,
    pub t: u32,
    pub value: Elem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    /// Inverse of the first operand; the second is ignored.
    Inv,
    /// First operand raised to this exponent; the second is ignored.
    Pow(u64),
}

#[derive(Debug)]
pub struct Field {
    spec: FieldSpec,
    p: u32,
    t: u32,
    q: u32,
    /// exp[i] = g^i for i < 2(q-1).
    exp: Vec<Elem>,
    log: Vec<u32>,
    tr: Vec<u32>,
    sdb: Option<SelfDualBasis>,
}

pub type FieldRef = Arc<Field>;

impl Field {
    pub fn new(spec: FieldSpec) -> Result<FieldRef> {
        let (p, t, q) = (spec.p, spec.t, spec.q());
        let mut f = Field { spec, p, t, q, exp: vec![], log: vec![0; q as usize], tr: vec![], sdb: None };
        let qm1 = (q - 1) as usize;
        let mut gen = None;
        'search: for g in 1..q {
            let mut x = 1;
            for k in 1..=qm1 {
                x = f.mul_slow(x, g);
                if x == 1 {
                    if k == qm1 {
                        gen = Some(g);
                        break 'search;
                    }
                    break;
                }
            }
        }
        let g = gen.ok_or(Error::NotIrreducible(t, p))?;
        let mut x = 1;
        f.exp = Vec::with_capacity(2 * qm1.max(1));
        for i in 0..2 * qm1.max(1) {
            f.exp.push(x);
            if i < qm1 {
                f.log[x as usize] = i as u32;
            }
            x = f.mul_slow(x, g);
        }
        f.tr = (0..q)
            .map(|a| {
                let mut acc = 0;
                let mut y = a;
                for _ in 0..t {
                    acc = f.add(acc, y);
                    y = f.pow(y, p as u64);
                }
                debug_assert!(acc < p);
                acc
            })
            .collect();
        f.sdb = f.search_self_dual_basis().ok();
        Ok(Arc::new(f))
    }

    pub fn canonical(p: u32, t: u32) -> Result<FieldRef> {
        Self::new(FieldSpec::canonical(p, t)?)
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }
    pub fn p(&self) -> u32 {
        self.p
    }
    pub fn t(&self) -> u32 {
        self.t
    }
    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn digits(&self, a: Elem) -> Vec<u32> {
        let mut a = a;
        (0..self.t)
            .map(|_| {
                let d = a % self.p;
                a /= self.p;
                d
            })
            .collect()
    }

    pub fn from_digits(&self, d: &[u32]) -> Result<Elem> {
        if d.len() != self.t as usize || d.iter().any(|&c| c >= self.p) {
            return Err(Error::InvalidOperand(format!("bad digit vector {d:?}")));
        }
        Ok(d.iter().rev().fold(0, |acc, &c| acc * self.p + c))
    }

    fn mul_slow(&self, a: Elem, b: Elem) -> Elem {
        let (da, db) = (self.digits(a), self.digits(b));
        let mut prod = vec![0u32; 2 * self.t as usize];
        for (i, &x) in da.iter().enumerate() {
            for (j, &y) in db.iter().enumerate() {
                prod[i + j] = (prod[i + j] + x * y) % self.p;
            }
        }
        let r = poly_rem(self.p, &prod, &self.spec.modulus);
        let mut r = r;
        r.resize(self.t as usize, 0);
        self.from_digits(&r).expect("reduced digits")
    }

    #[inline]
    pub fn add(&self, a: Elem, b: Elem) -> Elem {
        if self.p == 2 {
            return a ^ b;
        }
        let (mut a, mut b, mut out, mut place) = (a, b, 0, 1);
        while a > 0 || b > 0 {
            out += (a % self.p + b % self.p) % self.p * place;
            a /= self.p;
            b /= self.p;
            place *= self.p;
        }
        out
    }

    #[inline]
    pub fn neg(&self, a: Elem) -> Elem {
        if self.p == 2 {
            return a;
        }
        let (mut a, mut out, mut place) = (a, 0, 1);
        while a > 0 {
            out += (self.p - a % self.p) % self.p * place;
            a /= self.p;
            place *= self.p;
        }
        out
    }

    #[inline]
    pub fn sub(&self, a: Elem, b: Elem) -> Elem {
        self.add(a, self.neg(b))
    }

    #[inline]
    pub fn mul(&self, a: Elem, b: Elem) -> Elem {
        if a == 0 || b == 0 {
            return 0;
        }
        self.exp[(self.log[a as usize] + self.log[b as usize]) as usize]
    }

    pub fn inv(&self, a: Elem) -> Result<Elem> {
        if a == 0 {
            return Err(Error::InvalidOperand("inverse of zero".into()));
        }
        let qm1 = self.q - 1;
        Ok(self.exp[((qm1 - self.log[a as usize]) % qm1) as usize])
    }

    pub fn div(&self, a: Elem, b: Elem) -> Result<Elem> {
        Ok(self.mul(a, self.inv(b)?))
    }

    pub fn pow(&self, a: Elem, e: u64) -> Elem {
        if e == 0 {
            return 1;
        }
        if a == 0 {
            return 0;
        }
        let qm1 = (self.q - 1) as u64;
        self.exp[((self.log[a as usize] as u64 * (e % qm1)) % qm1) as usize]
    }

    /// Embeds an integer through the prime subfield.
    pub fn from_int(&self, k: i64) -> Elem {
        k.rem_euclid(self.p as i64) as Elem
    }

    /// Absolute trace, an element of Z_p.
    #[inline]
    pub fn trace(&self, a: Elem) -> u32 {
        self.tr[a as usize]
    }

    pub fn elements(&self) -> impl Iterator<Item = Elem> {
        0..self.q
    }

    pub fn elem(&self, value: Elem) -> Result<FieldElement> {
        if value >= self.q {
            return Err(Error::InvalidOperand(format!("{value} out of range for q = {}", self.q)));
        }
        Ok(FieldElement { p: self.p, t: self.t, value })
    }

    /// Checked arithmetic on tagged elements.
    pub fn arith(&self, a: FieldElement, b: FieldElement, op: ArithOp) -> Result<FieldElement> {
        for x in [a, b] {
            if (x.p, x.t) != (self.p, self.t) {
                return Err(Error::SpecMismatch(x.p, x.t, self.p, self.t));
            }
        }
        let value = match op {
            ArithOp::Add => self.add(a.value, b.value),
            ArithOp::Sub => self.sub(a.value, b.value),
            ArithOp::Mul => self.mul(a.value, b.value),
            ArithOp::Inv => self.inv(a.value)?,
            ArithOp::Pow(e) => self.pow(a.value, e),
        };
        self.elem(value)
    }

    fn search_self_dual_basis(&self) -> Result<SelfDualBasis> {
        let (p, t) = (self.p, self.t);
        if !(p == 2 || (p % 2 == 1 && t % 2 == 1)) {
            return Err(Error::NoSelfDualBasis(p, t));
        }
        if t > 6 {
            return Err(Error::SearchExhausted(t));
        }
        // Candidates with tr(b^2) = 1, extended depth-first in increasing order.
        let cands: Vec<Elem> = (1..self.q).filter(|&b| self.trace(self.mul(b, b)) == 1).collect();
        let mut stack: Vec<usize> = vec![];
        let mut next = 0usize;
        loop {
            if stack.len() == t as usize {
                return Ok(SelfDualBasis { basis: stack.iter().map(|&i| cands[i]).collect() });
            }
            let found = (next..cands.len()).find(|&i| {
                stack.iter().all(|&j| self.trace(self.mul(cands[i], cands[j])) == 0)
            });
            match found {
                Some(i) => {
                    stack.push(i);
                    next = i + 1;
                }
                None => match stack.pop() {
                    Some(i) => next = i + 1,
                    None => return Err(Error::SearchExhausted(t)),
                },
            }
        }
    }

    pub fn self_dual_basis(&self) -> Result<&SelfDualBasis> {
        self.sdb.as_ref().ok_or(Error::NoSelfDualBasis(self.p, self.t))
    }

    /// Z_p coordinates tr(a b_l) in the self-dual basis.
    pub fn coords(&self, a: Elem) -> Result<Vec<u32>> {
        let b = self.self_dual_basis()?;
        Ok(b.basis.iter().map(|&bl| self.trace(self.mul(a, bl))).collect())
    }

    pub fn uncoords(&self, c: &[u32]) -> Result<Elem> {
        let b = self.self_dual_basis()?;
        if c.len() != b.basis.len() {
            return Err(Error::LengthMismatch(c.len(), b.basis.len()));
        }
        Ok(c.iter().zip(&b.basis).fold(0, |acc, (&cl, &bl)| self.add(acc, self.mul(cl, bl))))
    }

    pub fn vec_dot(&self, u: &[Elem], v: &[Elem]) -> Result<Elem> {
        if u.len() != v.len() {
            return Err(Error::LengthMismatch(u.len(), v.len()));
        }
        Ok(self.dot(u, v))
    }

    /// Unchecked dot product; callers guarantee equal lengths.
    #[inline]
    pub fn dot(&self, u: &[Elem], v: &[Elem]) -> Elem {
        u.iter().zip(v).fold(0, |acc, (&a, &b)| self.add(acc, self.mul(a, b)))
    }

    pub fn tr_dot(&self, u: &[Elem], v: &[Elem]) -> Result<u32> {
        Ok(self.trace(self.vec_dot(u, v)?))
    }

    /// Index of a vector over GF(q) in lexicographic order, first entry least significant.
    pub fn vec_index(&self, v: &[Elem]) -> usize {
        v.iter().rev().fold(0usize, |acc, &x| acc * self.q as usize + x as usize)
    }

    pub fn vec_from_index(&self, mut idx: usize, n: usize) -> Vec<Elem> {
        (0..n)
            .map(|_| {
                let x = (idx % self.q as usize) as Elem;
                idx /= self.q as usize;
                x
            })
            .collect()
    }

    pub fn scale_vec(&self, c: Elem, v: &[Elem]) -> Vec<Elem> {
        v.iter().map(|&x| self.mul(c, x)).collect()
    }

    pub fn add_vec(&self, u: &[Elem], v: &[Elem]) -> Vec<Elem> {
        u.iter().zip(v).map(|(&a, &b)| self.add(a, b)).collect()
    }

    pub fn sub_vec(&self, u: &[Elem], v: &[Elem]) -> Vec<Elem> {
        u.iter().zip(v).map(|(&a, &b)| self.sub(a, b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gf4() -> FieldRef {
        Field::canonical(2, 2).unwrap()
    }

    // Independent oracle: schoolbook product of digit polynomials mod x^2+x+1 over GF(2).
    fn gf4_mul_oracle(a: u32, b: u32) -> u32 {
        let (a0, a1, b0, b1) = (a & 1, a >> 1, b & 1, b >> 1);
        let c0 = a0 * b0;
        let c1 = a0 * b1 + a1 * b0;
        let c2 = a1 * b1;
        // x^2 = x + 1
        let r0 = (c0 + c2) % 2;
        let r1 = (c1 + c2) % 2;
        r0 | (r1 << 1)
    }

    #[test]
    fn gf4_products_match_oracle() {
        let f = gf4();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(f.mul(a, b), gf4_mul_oracle(a, b));
            }
        }
        let w = 2;
        let w2 = f.mul(w, w);
        assert_eq!(w2, 3);
        assert_eq!(f.mul(w, w2), 1);
    }

    #[test]
    fn small_identities() {
        let f = gf4();
        for a in 0..4 {
            assert_eq!(f.add(a, a), 0);
        }
        assert_eq!(f.inv(1).unwrap(), 1);
        assert!(matches!(f.inv(0), Err(Error::InvalidOperand(_))));
        assert_eq!(f.trace(0), 0);
        assert_eq!(f.trace(2), 1);
        assert_eq!(f.trace(1), 0);
    }

    #[test]
    fn checked_arith_rejects_mixed_specs() {
        let f = gf4();
        let g = Field::canonical(3, 2).unwrap();
        let a = f.elem(2).unwrap();
        let b = g.elem(2).unwrap();
        assert!(matches!(f.arith(a, b, ArithOp::Add), Err(Error::SpecMismatch(..))));
        assert_eq!(f.arith(a, f.elem(3).unwrap(), ArithOp::Mul).unwrap().value, 1);
        assert_eq!(f.arith(a, a, ArithOp::Pow(3)).unwrap().value, 1);
    }

    #[test]
    fn table_moduli_are_irreducible() {
        for p in [2, 3] {
            for t in 1..=6 {
                Field::canonical(p, t).unwrap();
            }
        }
        Field::canonical(5, 1).unwrap();
        assert!(matches!(
            FieldSpec::with_modulus(2, vec![1, 0, 1]),
            Err(Error::NotIrreducible(2, 2))
        ));
        assert!(matches!(FieldSpec::canonical(2, 17), Err(Error::NoModulus(..))));
    }

    #[test]
    fn self_dual_bases() {
        assert_eq!(Field::canonical(2, 1).unwrap().self_dual_basis().unwrap().basis, vec![1]);
        assert_eq!(gf4().self_dual_basis().unwrap().basis, vec![2, 3]);
        assert!(matches!(
            Field::canonical(3, 2).unwrap().self_dual_basis(),
            Err(Error::NoSelfDualBasis(3, 2))
        ));
        for (p, t) in [(2, 3), (2, 4), (2, 5), (2, 6), (3, 1), (3, 3), (3, 5)] {
            let f = Field::canonical(p, t).unwrap();
            let b = &f.self_dual_basis().unwrap().basis;
            for i in 0..b.len() {
                for j in 0..b.len() {
                    assert_eq!(f.trace(f.mul(b[i], b[j])), (i == j) as u32, "GF({p}^{t})");
                }
            }
        }
    }

    #[test]
    fn coords_round_trip_exhaustive() {
        for (p, t) in [(2, 1), (2, 2), (2, 3), (2, 6), (3, 1), (3, 3)] {
            let f = Field::canonical(p, t).unwrap();
            if f.q() > 64 {
                continue;
            }
            let b = f.self_dual_basis().unwrap().basis.clone();
            for (l, &bl) in b.iter().enumerate() {
                let c = f.coords(bl).unwrap();
                assert!(c.iter().enumerate().all(|(i, &x)| x == (i == l) as u32));
            }
            for a in f.elements() {
                assert_eq!(f.uncoords(&f.coords(a).unwrap()).unwrap(), a);
                for bb in f.elements() {
                    let ca = f.coords(a).unwrap();
                    let cb = f.coords(bb).unwrap();
                    let dot = ca.iter().zip(&cb).map(|(x, y)| x * y).sum::<u32>() % p;
                    assert_eq!(f.trace(f.mul(a, bb)), dot);
                }
            }
        }
    }

    #[test]
    fn group_order_exhaustive() {
        for (p, t) in [(2, 1), (2, 2), (2, 3), (2, 4), (2, 5), (2, 6), (3, 1), (3, 2), (3, 3), (5, 1)] {
            let f = Field::canonical(p, t).unwrap();
            for a in 1..f.q() {
                assert_eq!(f.pow(a, (f.q() - 1) as u64), 1);
                assert_eq!(f.mul(a, f.inv(a).unwrap()), 1);
            }
        }
    }

    #[test]
    fn dot_products() {
        let f = gf4();
        assert_eq!(f.vec_dot(&[2, 1], &[1, 2]).unwrap(), 0);
        assert_eq!(f.vec_dot(&[0, 0], &[3, 2]).unwrap(), 0);
        assert_eq!(f.vec_dot(&[0, 1], &[3, 2]).unwrap(), 2);
        assert!(matches!(f.vec_dot(&[1], &[1, 2]), Err(Error::LengthMismatch(1, 2))));
        assert_eq!(f.tr_dot(&[2, 0], &[1, 1]).unwrap(), 1);
    }

    #[test]
    fn spec_serializes_as_digits() {
        let s = FieldSpec::canonical(2, 2).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"p":2,"t":2,"modulus":[1,1,1]}"#);
        let f = gf4();
        assert_eq!(f.digits(2), vec![0, 1]);
        assert_eq!(f.from_digits(&[1, 1]).unwrap(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn trace_is_additive_and_frobenius_invariant(pt in 0usize..6, a in 0u32..65536, b in 0u32..65536) {
            let (p, t) = [(2, 4), (2, 6), (3, 3), (3, 5), (2, 2), (3, 2)][pt];
            let f = Field::canonical(p, t).unwrap();
            let (a, b) = (a % f.q(), b % f.q());
            prop_assert_eq!(f.trace(f.add(a, b)), (f.trace(a) + f.trace(b)) % p);
            prop_assert_eq!(f.trace(f.pow(a, p as u64)), f.trace(a));
            let c = f.from_int(2);
            prop_assert_eq!(f.trace(f.mul(c, a)), (2 * f.trace(a)) % p);
        }

        #[test]
        fn field_laws(a in 0u32..81, b in 0u32..81, c in 0u32..81) {
            let f = Field::canonical(3, 4).unwrap();
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            prop_assert_eq!(f.sub(f.add(a, b), b), a);
            prop_assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
        }
    }
}
