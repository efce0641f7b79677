//! A linear PCP of proximity over the Hadamard encoding (BLR plus
//! self-correction), and the sum game in which k provers holding an encoded
//! state certify the value b . a of a W-basis outcome a.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::css::{routed_rounds, shared_state, CodeCheck, CssCode, Frames, LinearCode};
use crate::error::{Error, Result};
use crate::games::{
    linear_answer, plane_point_ok, Answer, Decide, FnResolver, LocalMeasurement, LowDeg, PairTest, PauliProver, Question, Resolver,
    Round, Strategy, SumQuery, Verdict,
};
use crate::gf::{Elem, Field, FieldRef};
use crate::qsim::{apply_axis, identity, tau, Basis, Mat, StateVec, C64};
use crate::rmpoly::{
    curve_through, restrict, rewrite_univariate, subst_len, subst_map, AffineSubspace, CoordInjection, Curve, Domain,
    MultiPoly,
};

pub const TABLE_CAP: usize = 1 << 16;
/// Oracle reads of one lin test: one of g, five of the proof.
pub const LIN_QUERY_BUDGET: usize = 8;

fn table_len(f: &Field, n: usize) -> Result<usize> {
    let len = (f.q() as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if len > TABLE_CAP as u128 {
        return Err(Error::DimensionCap(format!("proof table of q^n = {len} entries exceeds {TABLE_CAP}")));
    }
    Ok(len as usize)
}

// ---------------------------------------------------------------- proofs

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backing {
    Honest(Vec<Elem>),
    Adversarial,
}

/// Proof table u -> Pi(u), indexed by `Field::vec_index`.
#[derive(Clone, Debug)]
pub struct LinearProof {
    pub f: FieldRef,
    pub n: usize,
    pub table: Vec<Elem>,
    pub backing: Backing,
}

impl LinearProof {
    /// Pi(u) = u . a.
    pub fn honest(f: &FieldRef, a: &[Elem]) -> Result<Self> {
        let n = a.len();
        let table = (0..table_len(f, n)?).map(|i| f.dot(&f.vec_from_index(i, n), a)).collect();
        Ok(Self { f: f.clone(), n, table, backing: Backing::Honest(a.to_vec()) })
    }

    pub fn adversarial(f: &FieldRef, n: usize, table: Vec<Elem>) -> Result<Self> {
        let len = table_len(f, n)?;
        if table.len() != len {
            return Err(Error::LengthMismatch(table.len(), len));
        }
        if let Some(&bad) = table.iter().find(|&&x| x >= f.q()) {
            return Err(Error::InvalidOperand(format!("table entry {bad} outside GF({})", f.q())));
        }
        Ok(Self { f: f.clone(), n, table, backing: Backing::Adversarial })
    }

    pub fn read(&self, u: &[Elem]) -> Elem {
        self.table[self.f.vec_index(u)]
    }

    /// Number of differing entries.
    pub fn distance(&self, o: &LinearProof) -> usize {
        self.table.iter().zip(&o.table).filter(|(a, b)| a != b).count()
    }
}

/// The Hadamard proof does not depend on b; b is only checked for shape.
pub fn build_proof(f: &FieldRef, a: &[Elem], b: &[Elem]) -> Result<LinearProof> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    LinearProof::honest(f, a)
}

/// Text export: header "p t n", then one "index value" line per entry with the
/// value as base-p digits, lowest power first.
pub fn export_table(proof: &LinearProof) -> String {
    let f = &proof.f;
    let mut s = format!("{} {} {}\n", f.p(), f.t(), proof.n);
    for (i, &x) in proof.table.iter().enumerate() {
        let d: String = f.digits(x).iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("{i} {d}\n"));
    }
    s
}

pub fn parse_table(text: &str) -> Result<LinearProof> {
    let mut lines = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty table".into()))?
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad header field {x:?}"))))
        .collect::<Result<_>>()?;
    let [p, t, n] = header[..] else {
        return Err(Error::Parse("header must be \"p t n\"".into()));
    };
    let f = Field::canonical(p as u32, t as u32)?;
    let len = table_len(&f, n)?;
    let mut table = vec![None; len];
    for l in lines {
        let (i, v) = l.split_once(char::is_whitespace).ok_or_else(|| Error::Parse(format!("bad line {l:?}")))?;
        let i: usize = i.parse().map_err(|_| Error::Parse(format!("bad index {i:?}")))?;
        let digits: Vec<u32> = v.trim().chars().map(|c| c.to_digit(10).ok_or_else(|| Error::Parse(format!("bad digit in {v:?}")))).collect::<Result<_>>()?;
        if digits.len() != t {
            return Err(Error::Parse(format!("entry {i} has {} digits, expected {t}", digits.len())));
        }
        let slot = table.get_mut(i).ok_or_else(|| Error::Parse(format!("index {i} out of range")))?;
        *slot = Some(f.from_digits(&digits)?);
    }
    let table = table
        .into_iter()
        .enumerate()
        .map(|(i, x)| x.ok_or_else(|| Error::Parse(format!("missing entry {i}"))))
        .collect::<Result<_>>()?;
    LinearProof::adversarial(&f, n, table)
}

// ---------------------------------------------------------------- lin test

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinTestSpec {
    pub b: Vec<Elem>,
    pub c: Elem,
}

/// Verifier coins of one lin test.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LinQueries {
    pub u: Vec<Elem>,
    pub v: Vec<Elem>,
    pub x: Vec<Elem>,
}

impl LinQueries {
    pub fn sample<R: Rng + ?Sized>(f: &Field, n: usize, m: usize, rng: &mut R) -> Self {
        let mut draw = |len: usize| (0..len).map(|_| rng.gen_range(0..f.q())).collect();
        LinQueries { u: draw(n), v: draw(n), x: draw(m) }
    }

    /// Every coin tuple, q^(2n+m) of them.
    pub fn all(f: &Field, n: usize, m: usize) -> Result<Vec<Self>> {
        let total = (f.q() as u128).checked_pow((2 * n + m) as u32).unwrap_or(u128::MAX);
        if total > 1 << 22 {
            return Err(Error::DimensionCap(format!("{total} lin query tuples")));
        }
        let (nu, nx) = ((f.q() as usize).pow(n as u32), (f.q() as usize).pow(m as u32));
        let mut out = Vec::with_capacity(total as usize);
        for iu in 0..nu {
            for iv in 0..nu {
                for ix in 0..nx {
                    out.push(LinQueries { u: f.vec_from_index(iu, n), v: f.vec_from_index(iv, n), x: f.vec_from_index(ix, m) });
                }
            }
        }
        Ok(out)
    }

    /// Proof positions read: u, v, u+v, b-u, x_pi-u.
    pub fn proof_reads(&self, f: &Field, inj: &CoordInjection, b: &[Elem]) -> Result<[Vec<Elem>; 5]> {
        let xp = inj.expand(f, &self.x)?;
        Ok([self.u.clone(), self.v.clone(), f.add_vec(&self.u, &self.v), f.sub_vec(b, &self.u), f.sub_vec(&xp, &self.u)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinValues {
    pub gx: Elem,
    pub pi: [Elem; 5],
}

/// BLR, self-corrected value, and encoding consistency.
pub fn lin_accepts(f: &Field, v: &LinValues, c: Elem) -> bool {
    let p = &v.pi;
    f.add(p[0], p[1]) == p[2] && f.add(p[0], p[3]) == c && f.add(p[0], p[4]) == v.gx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinRun {
    pub accept: bool,
    pub reads: usize,
}

/// One lin test on fixed coins, counting oracle reads.
pub fn lin_run(proof: &LinearProof, g: &dyn Fn(&[Elem]) -> Elem, inj: &CoordInjection, spec: &LinTestSpec, qs: &LinQueries) -> Result<LinRun> {
    let f = &proof.f;
    if spec.b.len() != proof.n || inj.n != proof.n {
        return Err(Error::LengthMismatch(spec.b.len(), proof.n));
    }
    let mut reads = 0;
    let mut rd = |u: &[Elem]| {
        reads += 1;
        proof.read(u)
    };
    let pos = qs.proof_reads(f, inj, &spec.b)?;
    let pi = [rd(&pos[0]), rd(&pos[1]), rd(&pos[2]), rd(&pos[3]), rd(&pos[4])];
    let gx = g(&qs.x);
    reads += 1;
    debug_assert!(reads <= LIN_QUERY_BUDGET);
    Ok(LinRun { accept: lin_accepts(f, &LinValues { gx, pi }, spec.c), reads })
}

pub fn lin_test<R: Rng + ?Sized>(
    proof: &LinearProof,
    g: &dyn Fn(&[Elem]) -> Elem,
    inj: &CoordInjection,
    spec: &LinTestSpec,
    rng: &mut R,
) -> Result<LinRun> {
    let qs = LinQueries::sample(&proof.f, proof.n, inj.m, rng);
    lin_run(proof, g, inj, spec, &qs)
}

/// Exact rejection probability over all coin tuples.
pub fn lin_reject_prob(proof: &LinearProof, g: &dyn Fn(&[Elem]) -> Elem, inj: &CoordInjection, spec: &LinTestSpec) -> Result<f64> {
    let all = LinQueries::all(&proof.f, proof.n, inj.m)?;
    let mut rejected = 0usize;
    for qs in &all {
        if !lin_run(proof, g, inj, spec, qs)?.accept {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / all.len() as f64)
}

// ---------------------------------------------------------------- curves

/// Query points grouped into chunks of at most q, each chunk on an outer curve
/// (parameters 0..l-1) paired with an inner curve through the substituted
/// parameters. Singleton chunks are padded with a repeat so curves have degree >= 1.
#[derive(Clone, Debug)]
pub struct CurvePlan {
    pub pairs: Vec<(Curve, Curve)>,
    /// (chunk, parameter) of each input point.
    pub slots: Vec<(usize, Elem)>,
    /// Substitution degree of each chunk.
    pub degs: Vec<u32>,
}

impl CurvePlan {
    /// Degree bound on an honest answer along the inner curve of chunk j.
    pub fn answer_bound(&self, j: usize) -> u32 {
        subst_len(self.degs[j]) as u32 * self.pairs[j].1.degree as u32
    }
}

pub fn plan_curves(f: &Field, points: &[Vec<Elem>], deg: u32) -> Result<CurvePlan> {
    let mut plan = CurvePlan { pairs: vec![], slots: vec![], degs: vec![] };
    for (j, chunk) in points.chunks(f.q() as usize).enumerate() {
        let mut pts = chunk.to_vec();
        if pts.len() == 1 {
            pts.push(pts[0].clone());
        }
        let outer = curve_through(f, &pts)?;
        let dd = deg * outer.degree as u32;
        let subs: Vec<Vec<Elem>> = (0..pts.len() as u32).map(|t| subst_map(f, t, dd)).collect();
        let inner = curve_through(f, &subs)?;
        plan.slots.extend((0..chunk.len() as u32).map(|t| (j, t)));
        plan.pairs.push((outer, inner));
        plan.degs.push(dd);
    }
    Ok(plan)
}

/// p along `outer`, rewritten as a multilinear polynomial in the substituted
/// variables; `deg` bounds the total degree of p.
pub fn substituted(f: &Field, p: &MultiPoly, deg: u32, outer: &Curve) -> Result<MultiPoly> {
    let r = restrict(f, p, Domain::Curve(outer))?.poly;
    let dd = deg * outer.degree as u32;
    let mut coeffs = vec![0; dd as usize + 1];
    for (e, &c) in &r.terms {
        let k = e.first().copied().unwrap_or(0) as usize;
        if k >= coeffs.len() {
            return Err(Error::InvalidParam(format!("restriction has degree {k} > {dd}")));
        }
        coeffs[k] = f.add(coeffs[k], c);
    }
    rewrite_univariate(f, &coeffs, dd)
}

// ---------------------------------------------------------------- sum game

/// Parameters of the sum game: the code-check instance for g and the proof
/// extension over GF(q)^m2, with h^m2 >= q^n.
#[derive(Clone, Debug)]
pub struct SumSetup {
    pub code: LinearCode,
    pub ld: LowDeg,
    pub inj: CoordInjection,
    pub inj2: CoordInjection,
    /// Plane-vs-point degree for the proof extension.
    pub d2: u32,
    /// Weights of parts (a), (b), (c), (d).
    pub weights: [f64; 4],
}

impl SumSetup {
    pub fn new(code: LinearCode, n: usize, h: u32) -> Result<Self> {
        let cc = CodeCheck::new(code, n, h, 1)?;
        let f = cc.ld.f.clone();
        let len = table_len(&f, n)?;
        let mut m2 = 2usize;
        while (h as u128).pow(m2 as u32) < len as u128 {
            m2 += 1;
        }
        let inj2 = CoordInjection::new(len, h, m2, f.q())?;
        Ok(Self { code: cc.code, ld: cc.ld, inj: cc.inj, inj2, d2: h * m2 as u32, weights: [0.25; 4] })
    }

    pub fn with_weights(mut self, w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!("part weights {w:?} must be nonnegative and sum to 1")));
        }
        self.weights = w;
        Ok(self)
    }

    pub fn f(&self) -> &FieldRef {
        &self.ld.f
    }

    pub fn n(&self) -> usize {
        self.inj.n
    }

    pub fn g_deg(&self) -> u32 {
        self.inj.m as u32 * (self.inj.h - 1)
    }

    pub fn h_deg(&self) -> u32 {
        self.inj2.m as u32 * (self.inj2.h - 1)
    }

    /// Point of GF(q)^m2 carrying the proof entry at u.
    pub fn proof_point(&self, u: &[Elem]) -> Vec<Elem> {
        self.inj2.table[self.f().vec_index(u)].clone()
    }

    /// Low-degree extension of a proof table.
    pub fn proof_poly(&self, table: &[Elem]) -> Result<MultiPoly> {
        self.inj2.encode(self.f(), table)
    }

    pub fn layout(&self, b: &[Elem], qs: &LinQueries) -> Result<LinLayout> {
        let f = self.f();
        let reads = qs.proof_reads(f, &self.inj, b)?;
        let hp: Vec<Vec<Elem>> = reads.iter().map(|u| self.proof_point(u)).collect();
        Ok(LinLayout { g: plan_curves(f, &[qs.x.clone()], self.g_deg())?, h: plan_curves(f, &hp, self.h_deg())? })
    }
}

/// Curves carrying the reads of one lin test: g at x, and the five proof reads.
#[derive(Clone, Debug)]
pub struct LinLayout {
    pub g: CurvePlan,
    pub h: CurvePlan,
}

impl LinLayout {
    pub fn query(&self) -> SumQuery {
        SumQuery::Curves { g: self.g.pairs.clone(), h: self.h.pairs.clone() }
    }

    /// Claimed value and lin reads from an answer Tuple[c, Tuple(g polys), Tuple(h polys)].
    pub fn decode(&self, f: &Field, ans: &Answer) -> Option<(Elem, LinValues)> {
        let t = ans.tuple(3)?;
        let c = t[0].scalar(f)?;
        let gs = t[1].tuple(self.g.pairs.len())?;
        let hs = t[2].tuple(self.h.pairs.len())?;
        let read = |plan: &CurvePlan, polys: &[Answer], slot: usize| -> Option<Elem> {
            let (j, tau) = plan.slots[slot];
            let p = polys[j].as_poly()?;
            (p.num_vars == 1 && p.total_degree() <= plan.answer_bound(j)).then(|| p.eval_unchecked(f, &[tau]))
        };
        let gx = read(&self.g, gs, 0)?;
        let mut pi = [0; 5];
        for (i, x) in pi.iter_mut().enumerate() {
            *x = read(&self.h, hs, i)?;
        }
        Some((c, LinValues { gx, pi }))
    }
}

fn sum_q(w: Basis, b: &[Elem], query: SumQuery) -> Question {
    Question::Sum { basis: w, b: b.to_vec(), query }
}

/// Planes (half the mass) and points (the other half) of GF(q)^m.
fn lowdeg_marginal(f: &Field, m: usize) -> Vec<(AffineSubspace, f64)> {
    let planes = AffineSubspace::all_planes(f, m);
    let npts = (f.q() as usize).pow(m as u32);
    let mut out: Vec<(AffineSubspace, f64)> = planes.iter().map(|s| (s.clone(), 0.5 / planes.len() as f64)).collect();
    out.extend((0..npts).map(|i| (AffineSubspace::point(f, f.vec_from_index(i, m)), 0.5 / npts as f64)));
    out
}

/// Plane-vs-point pairs: (first, second, parameter, plane first, weight).
fn plane_point_pairs(f: &Field, m: usize) -> Vec<(AffineSubspace, AffineSubspace, Vec<Elem>, bool, f64)> {
    let q = f.q();
    let planes = AffineSubspace::all_planes(f, m);
    let unit = 1.0 / (2.0 * planes.len() as f64 * (q * q) as f64);
    let mut out = vec![];
    for s in &planes {
        for i in 0..q * q {
            let lam = vec![i % q, i / q];
            let pt = AffineSubspace::point(f, s.at(f, &lam));
            out.push((s.clone(), pt.clone(), lam.clone(), true, unit));
            out.push((pt, s.clone(), lam, false, unit));
        }
    }
    out
}

/// Part (a): the special prover's plane or point against the g component of
/// the composite Pair answer.
fn part_a(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], t: usize) -> Vec<PairTest> {
    let f = sp.f();
    let mg = lowdeg_marginal(f, sp.inj.m);
    let mh = lowdeg_marginal(f, sp.inj2.m);
    let mut out = vec![];
    for (s, ws) in &mg {
        for (s2, ws2) in &mh {
            out.push(PairTest {
                weight: ws * ws2,
                branch: "a".into(),
                first: Question::Sub { basis: w, s: s.clone() },
                second: sum_q(w, &bs[t], SumQuery::Pair { s: s.clone(), s2: s2.clone() }),
                decide: Arc::new(|a, c| {
                    Verdict::from_bool(matches!(c.tuple(2), Some([r, _]) if r.as_poly().is_some() && r == a))
                }),
            });
        }
    }
    out
}

/// Part (b): plane-vs-point on g and on the proof extension in parallel.
fn part_b(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], t: usize) -> Vec<PairTest> {
    let f = sp.f();
    let pg = plane_point_pairs(f, sp.inj.m);
    let ph = plane_point_pairs(f, sp.inj2.m);
    let (d, d2) = (sp.ld.d, sp.d2);
    let mut out = vec![];
    for (a1, a2, lam, pf, wa) in &pg {
        for (b1, b2, mu, pf2, wb) in &ph {
            let fr = f.clone();
            let (lam, mu, pf, pf2) = (lam.clone(), mu.clone(), *pf, *pf2);
            out.push(PairTest {
                weight: wa * wb,
                branch: "b".into(),
                first: sum_q(w, &bs[t], SumQuery::Pair { s: a1.clone(), s2: b1.clone() }),
                second: sum_q(w, &bs[t], SumQuery::Pair { s: a2.clone(), s2: b2.clone() }),
                decide: Arc::new(move |x, y| {
                    let (Some([xg, xh]), Some([yg, yh])) = (x.tuple(2), y.tuple(2)) else {
                        return Verdict::reject();
                    };
                    let ok = |pl: &Answer, pt: &Answer, first: bool, deg: u32, l: &[Elem]| {
                        if first {
                            plane_point_ok(&fr, deg, pl, l, pt)
                        } else {
                            plane_point_ok(&fr, deg, pt, l, pl)
                        }
                    };
                    Verdict::from_bool(ok(xg, yg, pf, d, &lam) && ok(xh, yh, pf2, d2, &mu))
                }),
            });
        }
    }
    out
}

/// Part (c): half point-vs-substituted-point, half curves-vs-substituted-point
/// together with the lin test on the decoded reads.
fn part_c(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], t: usize, coins: &[LinQueries]) -> Result<Vec<PairTest>> {
    let f = sp.f();
    let q = f.q();
    let b = &bs[t];
    let mut out = vec![];
    for qs in coins {
        let lay = Arc::new(sp.layout(b, qs)?);
        let (ng, nh) = (lay.g.pairs.len(), lay.h.pairs.len());
        let unit = 0.5 / (coins.len() * ng * nh * (q * q) as usize) as f64;
        let special_curves = sum_q(w, b, lay.query());
        for jg in 0..ng {
            for jh in 0..nh {
                let ((og, ig), (oh, ih)) = (&lay.g.pairs[jg], &lay.h.pairs[jh]);
                for t1 in 0..q {
                    for t2 in 0..q {
                        out.push(PairTest {
                            weight: unit,
                            branch: "c".into(),
                            first: sum_q(w, b, SumQuery::Points { y: og.at(f, t1), y2: oh.at(f, t2) }),
                            second: sum_q(
                                w,
                                b,
                                SumQuery::Subst {
                                    c: og.clone(),
                                    z: subst_map(f, t1, lay.g.degs[jg]),
                                    c2: oh.clone(),
                                    z2: subst_map(f, t2, lay.h.degs[jh]),
                                },
                            ),
                            decide: Arc::new(|x, y| Verdict::from_bool(x.tuple(2).is_some() && x == y)),
                        });
                        let (fr, l2) = (f.clone(), lay.clone());
                        out.push(PairTest {
                            weight: unit,
                            branch: "c".into(),
                            first: special_curves.clone(),
                            second: sum_q(
                                w,
                                b,
                                SumQuery::Subst { c: og.clone(), z: ig.at(f, t1), c2: oh.clone(), z2: ih.at(f, t2) },
                            ),
                            decide: Arc::new(move |x, y| {
                                let check = || -> Option<bool> {
                                    let (c, vals) = l2.decode(&fr, x)?;
                                    let [al, be] = y.tuple(2)? else { return None };
                                    let gt = x.tuple(3)?;
                                    let rg = gt[1].tuple(ng)?[jg].as_poly()?.eval_unchecked(&fr, &[t1]);
                                    let rh = gt[2].tuple(nh)?[jh].as_poly()?.eval_unchecked(&fr, &[t2]);
                                    Some(lin_accepts(&fr, &vals, c) && Some(rg) == al.scalar(&fr) && Some(rh) == be.scalar(&fr))
                                };
                                Verdict::from_bool(check() == Some(true))
                            }),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// What part (d) does with the summed claim sum_j c_j once every lin test passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finish {
    /// Accept and emit (-1)^{tr sum c}.
    Emit,
    /// Accept iff tr(sum c) = 0, i.e. the emitted value would be 1.
    TraceZero,
    /// Accept iff sum c equals the target.
    Equals(Elem),
}

/// Part (d) alone: every prover gets its own b_j with shared coins and player j
/// is sent `frames[j]`. Rejects unless every decoded lin test passes.
pub fn sum_part_d(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], frames: &[Option<Vec<usize>>], finish: Finish) -> Result<Vec<Round>> {
    let f = sp.f();
    if frames.len() != bs.len() {
        return Err(Error::LengthMismatch(frames.len(), bs.len()));
    }
    let coins = LinQueries::all(f, sp.n(), sp.inj.m)?;
    let mut rounds = vec![];
    for qs in &coins {
        let lays: Vec<LinLayout> = bs.iter().map(|b| sp.layout(b, qs)).collect::<Result<_>>()?;
        let questions = bs.iter().zip(&lays).zip(frames).map(|((b, l), fr)| sum_q(w, b, l.query()).framed(fr.as_deref())).collect();
        let fr = f.clone();
        let decide: Decide = Arc::new(move |a: &[&Answer]| {
            let mut total = 0;
            for (x, l) in a.iter().zip(&lays) {
                match l.decode(&fr, x) {
                    Some((c, v)) if lin_accepts(&fr, &v, c) => total = fr.add(total, c),
                    _ => return Verdict::reject(),
                }
            }
            match finish {
                Finish::Emit => Verdict { accept: 1.0, value: Some(if fr.trace(total) % 2 == 0 { 1.0 } else { -1.0 }) },
                Finish::TraceZero => Verdict::from_bool(fr.trace(total) % 2 == 0),
                Finish::Equals(b) => Verdict::from_bool(total == b),
            }
        });
        rounds.push(Round { weight: 1.0 / coins.len() as f64, branch: "d".into(), questions, decide });
    }
    Ok(rounds)
}

/// Part (d) with a uniformly chosen special prover t when the two frames differ.
pub fn sum_part_d_routed(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], frames: &Frames, finish: Finish) -> Result<Vec<Round>> {
    let k = bs.len();
    if frames.0 == frames.1 {
        return sum_part_d(sp, w, bs, &vec![frames.0.clone(); k], finish);
    }
    let mut out = vec![];
    for t in 0..k {
        let per: Vec<Option<Vec<usize>>> = (0..k).map(|j| if j == t { frames.0.clone() } else { frames.1.clone() }).collect();
        out.extend(sum_part_d(sp, w, bs, &per, finish)?.into_iter().map(|r| Round { weight: r.weight / k as f64, ..r }));
    }
    Ok(out)
}

pub fn sum_rounds(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], frames: &Frames) -> Result<Vec<Round>> {
    sum_rounds_with(sp, w, bs, frames, &(frames.0.clone(), frames.0.clone()), Finish::Emit)
}

/// Parts (a)-(c) routed with `abc`, part (d) with `d` and the given finish.
pub fn sum_rounds_with(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>], abc: &Frames, d: &Frames, finish: Finish) -> Result<Vec<Round>> {
    let f = sp.f();
    if f.p() != 2 {
        return Err(Error::UnsupportedPrime(f.p()));
    }
    if bs.len() != sp.code.k {
        return Err(Error::LengthMismatch(bs.len(), sp.code.k));
    }
    if let Some(b) = bs.iter().find(|b| b.len() != sp.n()) {
        return Err(Error::LengthMismatch(b.len(), sp.n()));
    }
    let coins = LinQueries::all(f, sp.n(), sp.inj.m)?;
    let [wa, wb, wc, wd] = sp.weights;
    let scale = |rs: Vec<Round>, x: f64| rs.into_iter().map(move |r| Round { weight: r.weight * x, ..r });
    let mut rounds = vec![];
    if wa > 0.0 {
        rounds.extend(scale(routed_rounds(&sp.code, abc, |t| Ok(part_a(sp, w, bs, t)))?, wa));
    }
    if wb > 0.0 {
        rounds.extend(scale(routed_rounds(&sp.code, abc, |t| Ok(part_b(sp, w, bs, t)))?, wb));
    }
    if wc > 0.0 {
        rounds.extend(scale(routed_rounds(&sp.code, abc, |t| part_c(sp, w, bs, t, &coins))?, wc));
    }
    rounds.extend(scale(sum_part_d_routed(sp, w, bs, d, finish)?, wd));
    Ok(rounds.into_iter().filter(|r| r.weight > 0.0).collect())
}

pub fn sum_game(sp: &SumSetup, w: Basis, bs: &[Vec<Elem>]) -> Result<crate::games::Game> {
    crate::games::Game::new(format!("sum-{w:?}"), sp.code.k, sum_rounds(sp, w, bs, &(None, None))?)
}

// ---------------------------------------------------------------- honest prover

/// The honest sum prover: the Pauli prover for plane and point questions, and
/// for sum questions a product-basis measurement labeled by the linear answer
/// built from the unit-vector encodings g_{e_i} and h_{e_i}.
pub struct SumProver {
    pub pp: PauliProver,
    g_deg: u32,
    h_deg: u32,
    gs: Vec<MultiPoly>,
    hs: Vec<MultiPoly>,
    cache: Mutex<HashMap<(Vec<Elem>, SumQuery), Arc<Vec<Answer>>>>,
}

impl SumProver {
    pub fn new(sp: &SumSetup) -> Result<Self> {
        let f = sp.f();
        let n = sp.n();
        let len = table_len(f, n)?;
        let mut gs = vec![];
        let mut hs = vec![];
        for i in 0..n {
            let mut e = vec![0; n];
            e[i] = 1;
            gs.push(sp.inj.encode(f, &e)?);
            let table: Vec<Elem> = (0..len).map(|j| f.vec_from_index(j, n)[i]).collect();
            hs.push(sp.proof_poly(&table)?);
        }
        Ok(Self {
            pp: PauliProver::new(sp.ld.clone(), sp.inj.clone())?,
            g_deg: sp.g_deg(),
            h_deg: sp.h_deg(),
            gs,
            hs,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn along(&self, p: &MultiPoly, deg: u32, outer: &Curve, inner: &Curve) -> Result<Answer> {
        let f = self.pp.f();
        Ok(Answer::Poly(restrict(f, &substituted(f, p, deg, outer)?, Domain::Curve(inner))?.poly))
    }

    /// Answers for each unit outcome e_i.
    pub fn pieces(&self, b: &[Elem], query: &SumQuery) -> Result<Arc<Vec<Answer>>> {
        let key = (b.to_vec(), query.clone());
        if let Some(p) = self.cache.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let f = self.pp.f().clone();
        let n = self.gs.len();
        if b.len() != n {
            return Err(Error::LengthMismatch(b.len(), n));
        }
        let pieces: Vec<Answer> = match query {
            SumQuery::Pair { s, s2 } => {
                let gp = self.pp.pieces(s)?;
                (0..n)
                    .map(|i| {
                        let h = restrict(&f, &self.hs[i], Domain::Subspace(s2))?.poly;
                        Ok(Answer::Tuple(vec![Answer::Poly(gp[i].clone()), Answer::Poly(h)]))
                    })
                    .collect::<Result<_>>()?
            }
            SumQuery::Points { y, y2 } => (0..n)
                .map(|i| Ok(Answer::Tuple(vec![Answer::Value(self.gs[i].eval(&f, y)?), Answer::Value(self.hs[i].eval(&f, y2)?)])))
                .collect::<Result<_>>()?,
            SumQuery::Subst { c, z, c2, z2 } => (0..n)
                .map(|i| {
                    let a = substituted(&f, &self.gs[i], self.g_deg, c)?.eval(&f, z)?;
                    let b = substituted(&f, &self.hs[i], self.h_deg, c2)?.eval(&f, z2)?;
                    Ok(Answer::Tuple(vec![Answer::Value(a), Answer::Value(b)]))
                })
                .collect::<Result<_>>()?,
            SumQuery::Curves { g, h } => (0..n)
                .map(|i| {
                    let ga = g.iter().map(|(o, inn)| self.along(&self.gs[i], self.g_deg, o, inn)).collect::<Result<_>>()?;
                    let ha = h.iter().map(|(o, inn)| self.along(&self.hs[i], self.h_deg, o, inn)).collect::<Result<_>>()?;
                    Ok(Answer::Tuple(vec![Answer::Value(b[i]), Answer::Tuple(ga), Answer::Tuple(ha)]))
                })
                .collect::<Result<_>>()?,
        };
        let pieces = Arc::new(pieces);
        self.cache.lock().unwrap().insert(key, pieces.clone());
        Ok(pieces)
    }
}

impl Resolver for SumProver {
    fn measure(&self, player: usize, q: &Question) -> Result<LocalMeasurement> {
        let (frame, inner) = q.unframe();
        match inner {
            Question::Sum { basis, b, query } => {
                let pieces = self.pieces(b, query)?;
                let f = self.pp.f().clone();
                self.pp.product_measure(&self.pp.patterns(frame, *basis), |e| linear_answer(&f, &pieces, e))
            }
            _ => self.pp.measure(player, q),
        }
    }
}

pub fn sum_strategy_on(sp: &SumSetup, state: StateVec) -> Result<Strategy> {
    let prover = SumProver::new(sp)?;
    let d = prover.pp.local_dim();
    Strategy::new(state, vec![d; sp.code.k], Arc::new(prover))
}

/// Honest strategy on the encoding of `psi` (or on code blocks when None).
pub fn sum_strategy(sp: &SumSetup, css: &CssCode, psi: Option<&StateVec>) -> Result<Strategy> {
    sum_strategy_on(sp, shared_state(css, sp.n(), psi)?)
}

/// <Psi| prod_j word_j |Psi> for player-major `state` with `blocks` sites per
/// player, word_j = tensor over data qudits i of tau_{patterns[i]}(bs[j][i]).
/// Honest strategy except that `player` adds `delta` to the claimed value of part (d).
pub fn flipped_claim_strategy(sp: &SumSetup, honest: &Strategy, player: usize, delta: Elem) -> Result<Strategy> {
    let base = honest.resolver.clone();
    let f = sp.f().clone();
    let cheat = FnResolver(move |p: usize, q: &Question| {
        let m = base.measure(p, q)?;
        if p != player || !matches!(q.unframe().1, Question::Sum { query: SumQuery::Curves { .. }, .. }) {
            return Ok(m);
        }
        Ok(m.map_labels(|a| match a {
            Answer::Tuple(t) if t.len() == 3 => {
                let mut t = t.clone();
                if let Answer::Value(c) = t[0] {
                    t[0] = Answer::Value(f.add(c, delta));
                }
                Answer::Tuple(t)
            }
            other => other.clone(),
        }))
    });
    Strategy::new((*honest.state).clone(), honest.dims.clone(), Arc::new(cheat))
}

pub fn word_expectation(f: &Field, state: &StateVec, blocks: usize, patterns: &[Basis], bs: &[Vec<Elem>]) -> Result<C64> {
    let mut v = state.clone();
    for (j, b) in bs.iter().enumerate() {
        for (i, (&w, &x)) in patterns.iter().zip(b).enumerate() {
            if x != 0 {
                v = v.apply_local(&tau(f, w, x), j * blocks + i)?;
            }
        }
    }
    Ok(state.inner(&v))
}

// ---------------------------------------------------------------- product form

fn projectors(m: &LocalMeasurement) -> Vec<(Answer, Mat)> {
    let d = m.dim();
    let basis = m.basis.as_deref().cloned().unwrap_or_else(|| identity(d));
    m.labels
        .iter()
        .enumerate()
        .map(|(l, a)| {
            let mut p = Mat::zeros(d, d);
            for col in (0..d).filter(|&c| m.label_of[c] as usize == l) {
                let v = basis.column(col);
                p += v * v.adjoint();
            }
            (a.clone(), p)
        })
        .collect()
}

/// Max over (s, s2) of sum_{r, r'} ||((M^{r r'} - A^r B^{r'}) x Id) Psi||^2 for
/// one player's Pair measurements M_{b,s,s2}, where A_s and B_{s2} are the
/// marginals averaged over the other question.
pub fn marginalize_check(
    st: &Strategy,
    player: usize,
    w: Basis,
    b: &[Elem],
    frame: Option<&[usize]>,
    ss: &[AffineSubspace],
    ss2: &[AffineSubspace],
) -> Result<f64> {
    let d = st.dims[player];
    let (left, right) = st.offsets();
    let mut joint: Vec<Vec<HashMap<(Answer, Answer), Mat>>> = vec![];
    for s in ss {
        let mut row = vec![];
        for s2 in ss2 {
            let q = sum_q(w, b, SumQuery::Pair { s: s.clone(), s2: s2.clone() }).framed(frame);
            let mut map = HashMap::new();
            for (a, p) in projectors(&st.resolver.measure(player, &q)?) {
                let [r, r2] = a.tuple(2).ok_or_else(|| Error::FormatMismatch("Pair answer is not a pair".into()))? else {
                    unreachable!()
                };
                *map.entry((r.clone(), r2.clone())).or_insert_with(|| Mat::zeros(d, d)) += p;
            }
            row.push(map);
        }
        joint.push(row);
    }
    let mut a_marg: Vec<HashMap<Answer, Mat>> = vec![HashMap::new(); ss.len()];
    let mut b_marg: Vec<HashMap<Answer, Mat>> = vec![HashMap::new(); ss2.len()];
    for (i, row) in joint.iter().enumerate() {
        for (j, map) in row.iter().enumerate() {
            for ((r, r2), p) in map {
                *a_marg[i].entry(r.clone()).or_insert_with(|| Mat::zeros(d, d)) += p / C64::new(ss2.len() as f64, 0.0);
                *b_marg[j].entry(r2.clone()).or_insert_with(|| Mat::zeros(d, d)) += p / C64::new(ss.len() as f64, 0.0);
            }
        }
    }
    let amps = &st.state.amps;
    let mut worst: f64 = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, map) in row.iter().enumerate() {
            let mut total = 0.0;
            for (r, ar) in &a_marg[i] {
                for (r2, br) in &b_marg[j] {
                    let mut op = -(ar * br);
                    if let Some(m) = map.get(&(r.clone(), r2.clone())) {
                        op += m;
                    }
                    total += apply_axis(amps, &op, left[player], d, right[player]).iter().map(|x| x.norm_sqr()).sum::<f64>();
                }
            }
            worst = worst.max(total);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::css::{catalog, css_from_code};
    use crate::games::exact_value;
    use crate::qsim::epr_state;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gf(p: u32, t: u32) -> FieldRef {
        Field::canonical(p, t).unwrap()
    }

    fn g_oracle(f: &FieldRef, inj: &CoordInjection, a: &[Elem]) -> impl Fn(&[Elem]) -> Elem {
        let g = inj.encode(f, a).unwrap();
        let f = f.clone();
        move |x: &[Elem]| g.eval_unchecked(&f, x)
    }

    #[test]
    fn honest_proof_tables() {
        let f = gf(2, 2);
        let inj = CoordInjection::new(3, 2, 2, 4).unwrap();
        let a = vec![1, 2, 3];
        let p = build_proof(&f, &a, &[0, 0, 0]).unwrap();
        let zero = build_proof(&f, &[0, 0, 0], &[0, 0, 0]).unwrap();
        assert!(zero.table.iter().all(|&x| x == 0));
        // linear in a, entrywise
        let a2 = vec![3, 3, 1];
        let p2 = build_proof(&f, &a2, &a2).unwrap();
        let sum = build_proof(&f, &f.add_vec(&a, &a2), &a).unwrap();
        for i in 0..sum.table.len() {
            assert_eq!(sum.table[i], f.add(p.table[i], p2.table[i]));
        }
        // Pi(x_pi) = g_a(x)
        let g = g_oracle(&f, &inj, &a);
        for i in 0..16 {
            let x = f.vec_from_index(i, 2);
            assert_eq!(p.read(&inj.expand(&f, &x).unwrap()), g(&x));
        }
        assert!(matches!(build_proof(&gf(2, 4), &[0; 5], &[0; 5]), Err(Error::DimensionCap(_))));
    }

    #[test]
    fn lin_completeness_and_wrong_value() {
        let f = gf(2, 1);
        let inj = CoordInjection::new(3, 2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ai in 0..8 {
            let a = f.vec_from_index(ai, 3);
            let p = build_proof(&f, &a, &a).unwrap();
            let g = g_oracle(&f, &inj, &a);
            for bi in 0..8 {
                let b = f.vec_from_index(bi, 3);
                let c = f.dot(&b, &a);
                let good = LinTestSpec { b: b.clone(), c };
                let bad = LinTestSpec { b, c: f.add(c, 1) };
                assert_eq!(lin_reject_prob(&p, &g, &inj, &good).unwrap(), 0.0);
                assert_eq!(lin_reject_prob(&p, &g, &inj, &bad).unwrap(), 1.0);
                let run = lin_test(&p, &g, &inj, &good, &mut rng).unwrap();
                assert!(run.accept && run.reads <= LIN_QUERY_BUDGET);
            }
        }
    }

    /// Min rejection over all 2^8 tables for a false claim; and, for a true
    /// claim, mean rejection by distance from the honest table over the tables
    /// whose nearest linear table is the honest one.
    fn adversarial_family() -> (f64, Vec<f64>) {
        let f = gf(2, 1);
        let inj = CoordInjection::new(3, 2, 2, 2).unwrap();
        let mut worst_false: f64 = 1.0;
        let mut by_dist = vec![(0.0, 0usize); 9];
        let a = vec![1, 0, 1];
        let honest = build_proof(&f, &a, &a).unwrap();
        let linear: Vec<LinearProof> = (0..8).map(|i| build_proof(&f, &f.vec_from_index(i, 3), &a).unwrap()).collect();
        let g = g_oracle(&f, &inj, &a);
        for mask in 0..256usize {
            let table: Vec<Elem> = (0..8).map(|i| ((mask >> i) & 1) as Elem).collect();
            let p = LinearProof::adversarial(&f, 3, table).unwrap();
            let dist = p.distance(&honest);
            let decodes = linear.iter().all(|l| p.distance(l) >= dist);
            for bi in 1..8 {
                let b = f.vec_from_index(bi, 3);
                let c = f.dot(&b, &a);
                let r = lin_reject_prob(&p, &g, &inj, &LinTestSpec { b: b.clone(), c: f.add(c, 1) }).unwrap();
                worst_false = worst_false.min(r);
                if decodes {
                    let r = lin_reject_prob(&p, &g, &inj, &LinTestSpec { b, c }).unwrap();
                    by_dist[dist].0 += r;
                    by_dist[dist].1 += 1;
                }
            }
        }
        (worst_false, by_dist.iter().filter(|e| e.1 > 0).map(|(s, n)| s / *n as f64).collect())
    }

    #[test]
    fn lin_soundness_floor_and_monotone() {
        let (worst, means) = adversarial_family();
        assert!(worst >= 0.125, "false-claim rejection floor {worst}");
        assert_eq!(means.len(), 5, "{means:?}");
        assert_eq!(means[0], 0.0);
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{means:?}");
        }
    }

    #[test]
    fn table_text_round_trip() {
        let f = gf(2, 2);
        let p = build_proof(&f, &[1, 2], &[0, 0]).unwrap();
        let q = parse_table(&export_table(&p)).unwrap();
        assert_eq!(q.table, p.table);
        assert_eq!(q.backing, Backing::Adversarial);
        assert!(parse_table("2 1 2\n0 1\n").is_err());
    }

    #[test]
    fn curves_recover_reads() {
        let f = gf(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inj = CoordInjection::new(5, 2, 3, 4).unwrap();
        let a: Vec<Elem> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let g = inj.encode(&f, &a).unwrap();
        let pts: Vec<Vec<Elem>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(0..4)).collect()).collect();
        let deg = 3;
        let plan = plan_curves(&f, &pts, deg).unwrap();
        assert_eq!(plan.pairs.len(), 2);
        for (k, pt) in pts.iter().enumerate() {
            let (j, tau) = plan.slots[k];
            let (o, i) = &plan.pairs[j];
            assert_eq!(&o.at(&f, tau), pt);
            let r = substituted(&f, &g, deg, o).unwrap();
            let u = restrict(&f, &r, Domain::Curve(i)).unwrap().poly;
            assert!(u.total_degree() <= plan.answer_bound(j));
            assert_eq!(u.eval_unchecked(&f, &[tau]), g.eval_unchecked(&f, pt));
            // substituted evaluation at #(t) is g along the outer curve
            for t in 0..4 {
                assert_eq!(r.eval_unchecked(&f, &subst_map(&f, t, plan.degs[j])), g.eval_unchecked(&f, &o.at(&f, t)));
            }
        }
    }

    fn epr_setup(n: usize) -> (SumSetup, CssCode) {
        let f = gf(2, 1);
        let code = catalog("epr", &f).unwrap();
        let css = css_from_code(&code).unwrap();
        (SumSetup::new(code, n, 2).unwrap(), css)
    }

    #[test]
    fn sum_honest_value_and_expectation() {
        for n in [2usize, 3] {
            let (sp, css) = epr_setup(n);
            let st = sum_strategy(&sp, &css, None).unwrap();
            for w in [Basis::Z, Basis::X] {
                let bs = vec![(0..n as u32).map(|i| (i + 1) % 2).collect::<Vec<_>>(), vec![1; n]];
                let game = sum_game(&sp, w, &bs).unwrap();
                let rep = exact_value(&game, &st).unwrap();
                assert!((rep.value - 1.0).abs() < 1e-9, "n={n} {w:?}: {rep:?}");
                let want = word_expectation(sp.f(), &st.state, n + 1, &vec![w; n], &bs).unwrap();
                assert!(want.im.abs() < 1e-12);
                let got = rep.branch("d").unwrap().emitted.unwrap();
                assert!((got - want.re).abs() < 1e-9, "n={n} {w:?}: {got} vs {}", want.re);
            }
        }
    }

    #[test]
    fn sum_b_zero_emits_one() {
        let (sp, css) = epr_setup(2);
        let st = sum_strategy(&sp, &css, None).unwrap();
        let game = crate::games::Game::new("d", 2, sum_part_d(&sp, Basis::Z, &[vec![0, 0], vec![0, 0]], &[None, None], Finish::Emit).unwrap()).unwrap();
        let rep = exact_value(&game, &st).unwrap();
        assert!((rep.value - 1.0).abs() < 1e-9);
        assert!((rep.branch("d").unwrap().emitted.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sum_flipped_claim_rejected() {
        let (sp, css) = epr_setup(2);
        let honest = sum_strategy(&sp, &css, None).unwrap();
        let st = flipped_claim_strategy(&sp, &honest, 0, 1).unwrap();
        let game = sum_game(&sp, Basis::Z, &[vec![1, 1], vec![1, 0]]).unwrap();
        let rep = exact_value(&game, &st).unwrap();
        let c = rep.branch("c").unwrap().value;
        let d = rep.branch("d").unwrap().value;
        // value check fails on every coin for the flipped prover
        assert!((d - 0.0).abs() < 1e-12, "{rep:?}");
        assert!((c - 0.75).abs() < 1e-12, "{rep:?}");
        assert!(rep.value < 1.0 - 0.2);
    }

    #[test]
    fn marginals_factorize_for_honest_and_not_for_planted_noise() {
        let (sp, css) = epr_setup(3);
        let st = sum_strategy(&sp, &css, None).unwrap();
        let f = sp.f().clone();
        let ss: Vec<AffineSubspace> = lowdeg_marginal(&f, sp.inj.m).into_iter().map(|x| x.0).collect();
        let ss2: Vec<AffineSubspace> = lowdeg_marginal(&f, sp.inj2.m).into_iter().map(|x| x.0).take(10).collect();
        let b = vec![1, 0, 1];
        let res = marginalize_check(&st, 0, Basis::Z, &b, None, &ss, &ss2).unwrap();
        assert!(res < 1e-12, "{res}");
        // residual 0 and the cross-checks of parts (a) and (b) pass
        let game = sum_game(&sp, Basis::Z, &[b.clone(), b.clone()]).unwrap();
        let rep = exact_value(&game, &st).unwrap();
        assert!((rep.branch("a").unwrap().value - 1.0).abs() < 1e-9);
        assert!((rep.branch("b").unwrap().value - 1.0).abs() < 1e-9);

        let base = st.resolver.clone();
        let fr = f.clone();
        let noisy = FnResolver(move |p: usize, q: &Question| {
            let m = base.measure(p, q)?;
            let Question::Sum { query: SumQuery::Pair { s, .. }, .. } = q.unframe().1 else { return Ok(m) };
            if s.dim() != 0 {
                return Ok(m);
            }
            // the proof component picks up the g point value: correlated across the pair
            Ok(m.map_labels(|a| match a.tuple(2) {
                Some([r, Answer::Poly(h)]) => {
                    let c = r.scalar(&fr).unwrap_or(0);
                    let shift = MultiPoly::constant(h.num_vars, c);
                    Answer::Tuple(vec![r.clone(), Answer::Poly(h.add(&fr, &shift))])
                }
                _ => a.clone(),
            }))
        });
        let st2 = Strategy::new((*st.state).clone(), st.dims.clone(), Arc::new(noisy)).unwrap();
        let res = marginalize_check(&st2, 0, Basis::Z, &b, None, &ss, &ss2).unwrap();
        assert!(res > 1e-3, "{res}");
    }

    #[test]
    fn sum_requires_even_characteristic_and_shapes() {
        let (sp, _) = epr_setup(2);
        assert!(matches!(sum_game(&sp, Basis::Z, &[vec![0, 0]]), Err(Error::LengthMismatch(1, 2))));
        assert!(sp.clone().with_weights([0.5, 0.5, 0.5, 0.0]).is_err());
        let f5 = gf(5, 1);
        assert!(matches!(SumSetup::new(catalog("epr", &f5).unwrap(), 2, 2), Err(Error::UnsupportedPrime(5))));
    }

    proptest! {
        #[test]
        fn self_correction_identity(a in proptest::collection::vec(0u32..4, 3), w in 0usize..64, u in 0usize..64) {
            let f = gf(2, 2);
            let p = build_proof(&f, &a, &a).unwrap();
            let (w, u) = (f.vec_from_index(w, 3), f.vec_from_index(u, 3));
            prop_assert_eq!(f.add(p.read(&u), p.read(&f.sub_vec(&w, &u))), p.read(&w));
        }
    }

    #[test]
    fn epr_state_layout_matches_shared_state() {
        let (sp, css) = epr_setup(2);
        let st = sum_strategy(&sp, &css, None).unwrap();
        let e = epr_state(sp.f(), 3).unwrap();
        // shared_state of the EPR code is |EPR>^{n+1} in player-major order
        assert!((st.state.inner(&e).norm() - 1.0).abs() < 1e-12);
    }
}
