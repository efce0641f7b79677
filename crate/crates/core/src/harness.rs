//! Declarative experiments: TOML configs, seeded runs and sweeps, transcripts
//! with replay, and the NDJSON verifier/prover wire protocol.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::css::{catalog, codecheck_game, codecheck_strategy, css_from_code, parse_code, CodeCheck, LinearCode};
use crate::error::Error;
use crate::games::{
    allocate, diagnostics, RoundSampler, exact_value, fnv1a, magic_square_game, mc_report, mc_run, ms_strategy, perturbed_strategy,
    qlowdeg_game, honest_pauli_strategy, question_dist, sample_accept, sample_outcome, stream_rng,
    AcceptanceReport, Answer, Game, LocalMeasurement, LowDeg, MsSlot, OutcomeDist, PairCtx, Question, Strategy, SumQuery,
    TrialRecord,
};
use crate::gf::{Elem, Field, FieldRef};
use crate::ham::{
    eigenpairs, energy_game, gap_amplify, gap_amplify_dense, min_eig, parse_hamiltonian, random_unit_hamiltonian,
    random_yfree, subsample_drift, tensor_power, xz_game, EvalSetup, HamFile,
};
use crate::linpcp::{
    build_proof, flipped_claim_strategy, lin_reject_prob, parse_table, sum_game, sum_strategy, word_expectation,
    LinTestSpec, LinearProof, SumSetup,
};
use crate::qsim::{Basis, Mat, StateVec, STATE_CAP_BITS};
use crate::rmpoly::{AffineSubspace, CoordInjection, Curve, MultiPoly};

pub const WIRE_VERSION: u32 = 1;

// ---------------------------------------------------------------- errors

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireErrorKind {
    Timeout,
    Malformed,
    VersionMismatch,
    ConfigMismatch,
    Io,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireFailure {
    pub kind: WireErrorKind,
    pub detail: String,
}

impl WireFailure {
    fn new(kind: WireErrorKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

impl std::fmt::Display for WireFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    /// A protocol constraint; the message names it.
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("wire: {0}")]
    Wire(WireFailure),
}

type HResult<T> = std::result::Result<T, HarnessError>;

fn invalid<T>(msg: impl Into<String>) -> HResult<T> {
    Err(HarnessError::Invalid(msg.into()))
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Exact,
    Mc,
}

fn default_trials() -> u64 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolTable {
    pub name: String,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
}

/// Union of every protocol's parameters; each protocol reads the ones it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
    /// Catalog name or path to a code file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    /// Number of Hamiltonian copies N in the XZ test.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<String>,
    /// "ground", "eigen:i" (ascending order) or "basis:d1d2..." (one digit per qudit).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    /// Rotation angle of player 0's Z-basis measurements.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    /// Sum test: one word b per prover, elements as digit strings separated by commas.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_claim: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sum_weights: Option<Vec<f64>>,
    /// lin: the message a.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// lin: an adversarial proof table file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub powers: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inv_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolTable,
    #[serde(default)]
    pub params: Params,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base: Option<PathBuf>,
}

pub const PROTOCOLS: [&str; 9] = ["qlowdeg", "ms", "codecheck", "sum", "energy", "xz", "lin", "amplify", "subsample"];

impl ExperimentConfig {
    pub fn parse(text: &str, base: Option<&Path>) -> HResult<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.base = base.map(Path::to_path_buf);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> HResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Identity of the game: protocol name and parameters, not seed or trials.
    pub fn fingerprint(&self) -> String {
        let v = json!({ "name": self.protocol.name, "params": serde_json::to_value(&self.params).unwrap() });
        format!("{:016x}", fnv1a(&v.to_string()))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        match &self.base {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        }
    }

    /// Copy with one parameter replaced; `value` is read as TOML (bare words become strings).
    pub fn with_param(&self, axis: &str, value: &str) -> HResult<Self> {
        let mut c = self.clone();
        match axis {
            "seed" | "trials" => {
                let x: u64 = value.parse().map_err(|_| HarnessError::Config(format!("{axis} needs an integer, got {value:?}")))?;
                if axis == "seed" {
                    c.protocol.seed = x
                } else {
                    c.protocol.trials = x
                }
            }
            _ => {
                let mut table = match toml::Value::try_from(&self.params).map_err(|e| HarnessError::Config(e.to_string()))? {
                    toml::Value::Table(t) => t,
                    _ => unreachable!("params serialize as a table"),
                };
                let parsed: toml::Value = format!("x = {value}")
                    .parse::<toml::Table>()
                    .ok()
                    .and_then(|mut t| t.remove("x"))
                    .unwrap_or_else(|| toml::Value::String(value.to_string()));
                table.insert(axis.to_string(), parsed);
                c.params = toml::Value::Table(table)
                    .try_into()
                    .map_err(|e: toml::de::Error| HarnessError::Config(format!("sweep axis {axis}: {e}")))?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn field(&self) -> HResult<FieldRef> {
        Ok(Field::canonical(self.params.p.unwrap_or(2), self.params.t.unwrap_or(1))?)
    }

    fn need<T: Clone>(&self, v: &Option<T>, name: &str) -> HResult<T> {
        v.clone().ok_or_else(|| HarnessError::Invalid(format!("protocol {} needs parameter {name}", self.protocol.name)))
    }

    /// Checks the selected protocol's constraints, naming the one violated.
    pub fn validate(&self) -> HResult<()> {
        let pr = &self.params;
        let name = self.protocol.name.as_str();
        if !PROTOCOLS.contains(&name) {
            return invalid(format!("unknown protocol {name:?}; expected one of {PROTOCOLS:?}"));
        }
        if self.protocol.mode == RunMode::Mc && self.protocol.trials == 0 {
            return invalid("trials >= 1 violated");
        }
        let p = pr.p.unwrap_or(2);
        let t = pr.t.unwrap_or(1);
        let games = ["qlowdeg", "codecheck", "sum", "energy", "xz"];
        if games.contains(&name) && p != 2 {
            return invalid(format!("p = 2 required for games (got p = {p})"));
        }
        let q_bits = t as f64 * (p as f64).log2();
        let cap = |players: usize, sites: usize| -> HResult<()> {
            let bits = (players * sites) as f64 * q_bits;
            if bits > STATE_CAP_BITS + 1e-9 {
                return invalid(format!(
                    "state cap q^(players x sites) <= 2^{STATE_CAP_BITS} violated: {players} players x {sites} qudits of GF({p}^{t})"
                ));
            }
            Ok(())
        };
        if let Some(x) = pr.xi {
            if !(0.0..=1.0).contains(&x) {
                return invalid(format!("0 <= xi <= 1 violated: xi = {x}"));
            }
        }
        if let Some(l) = pr.level {
            if l != 1 && l != 2 {
                return invalid(format!("level in {{1, 2}} violated: level = {l}"));
            }
        }
        if let Some(w) = &pr.sum_weights {
            if w.len() != 4 || w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid(format!("sum_weights must be 4 nonnegative numbers summing to 1, got {w:?}"));
            }
        }
        match name {
            "qlowdeg" => {
                let n = self.need(&pr.n, "n")?;
                let h = pr.h.unwrap_or(2);
                if h < 2 || h as u64 > (p as u64).pow(t) {
                    return invalid(format!("2 <= h <= q violated: h = {h}, q = {}", (p as u64).pow(t)));
                }
                if let Some(m) = pr.m {
                    if m < 2 {
                        return invalid(format!("m >= 2 violated: m = {m}"));
                    }
                    if (h as u128).pow(m as u32) < n as u128 {
                        return invalid(format!("h^m >= n violated: h = {h}, m = {m}, n = {n}"));
                    }
                }
                if let Some(th) = pr.theta {
                    if !th.is_finite() {
                        return invalid("theta must be finite");
                    }
                }
                cap(2, n + 1)?;
            }
            "ms" => {}
            "codecheck" | "sum" => {
                let n = self.need(&pr.n, "n")?;
                self.need(&pr.code, "code")?;
                let k = self.code()?.k;
                cap(k, n + 1)?;
                if name == "sum" {
                    let words = self.need(&pr.words, "words")?;
                    if words.len() != k {
                        return invalid(format!("one word per prover violated: {} words, {k} provers", words.len()));
                    }
                    for w in &words {
                        let v = parse_vec(&*self.field()?, w).map_err(HarnessError::Invalid)?;
                        if v.len() != n {
                            return invalid(format!("word length = n violated: {w:?} has {} entries, n = {n}", v.len()));
                        }
                    }
                    self.basis()?;
                }
            }
            "energy" | "xz" => {
                self.need(&pr.hamiltonian, "hamiltonian")?;
                let k = self.code()?.k;
                let n = self.hamiltonian_n()?;
                let copies = if name == "xz" { pr.copies.unwrap_or(1) } else { 1 };
                if copies == 0 {
                    return invalid("copies >= 1 violated");
                }
                cap(k, n * copies + 1)?;
            }
            "lin" => {
                let n = pr.n.unwrap_or(3);
                if (n as f64) * q_bits > 16.0 {
                    return invalid(format!("proof table q^n <= 2^16 violated: n = {n}, q = {}", (p as u64).pow(t)));
                }
            }
            "amplify" => {
                let inv_p = pr.inv_p.unwrap_or(0.1);
                for &a in pr.powers.as_deref().unwrap_or(&[2, 3]) {
                    if a == 0 || inv_p + 1.0 / a as f64 > 1.0 {
                        return invalid(format!("1/p + 1/a <= 1 violated: 1/p = {inv_p}, a = {a}"));
                    }
                }
            }
            "subsample" => {
                if pr.samples == Some(0) || pr.terms == Some(0) {
                    return invalid("samples >= 1 and terms >= 1 violated");
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn code(&self) -> HResult<LinearCode> {
        let name = self.params.code.as_deref().unwrap_or("rep4");
        let f = self.field()?;
        if ["epr", "steane", "rep4"].contains(&name) {
            return Ok(catalog(name, &f)?);
        }
        let path = self.resolve(name);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Config(format!("code {}: {e}", path.display())))?;
        let code = parse_code(&text)?;
        if code.f.q() != f.q() {
            return invalid(format!("code field GF({}) differs from configured GF({})", code.f.q(), f.q()));
        }
        Ok(code)
    }

    fn basis(&self) -> HResult<Basis> {
        match self.params.basis.as_deref().unwrap_or("Z") {
            "X" | "x" => Ok(Basis::X),
            "Z" | "z" => Ok(Basis::Z),
            b => invalid(format!("basis in {{X, Z}} violated: {b:?}")),
        }
    }

    fn hamiltonian(&self) -> HResult<HamFile> {
        let path = self.resolve(&self.need(&self.params.hamiltonian, "hamiltonian")?);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Config(format!("hamiltonian {}: {e}", path.display())))?;
        Ok(parse_hamiltonian(&text)?)
    }

    fn hamiltonian_n(&self) -> HResult<usize> {
        Ok(match self.hamiltonian()? {
            HamFile::YFree(h) => h.n,
            HamFile::LinearXz(h) => h.n,
        })
    }
}

pub fn parse_elem(f: &Field, s: &str) -> Result<Elem, String> {
    let digits: Vec<u32> = if f.p() <= 10 {
        s.chars().map(|c| c.to_digit(10).ok_or_else(|| format!("bad digit in {s:?}"))).collect::<Result<_, _>>()?
    } else {
        s.split('.').map(|d| d.parse().map_err(|_| format!("bad digit in {s:?}"))).collect::<Result<_, _>>()?
    };
    if digits.len() != f.t() as usize || digits.iter().any(|&d| d >= f.p()) {
        return Err(format!("{s:?} is not {} base-{} digits", f.t(), f.p()));
    }
    f.from_digits(&digits).map_err(|e| e.to_string())
}

pub fn show_elem(f: &Field, a: Elem) -> String {
    let d = f.digits(a);
    if f.p() <= 10 {
        d.iter().map(|x| char::from_digit(*x, 10).unwrap()).collect()
    } else {
        d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(".")
    }
}

pub fn parse_vec(f: &Field, s: &str) -> Result<Vec<Elem>, String> {
    s.split(',').map(|e| parse_elem(f, e.trim())).collect()
}

// ---------------------------------------------------------------- building

/// A game with the strategy it is run against.
pub struct Experiment {
    pub f: FieldRef,
    pub game: Game,
    pub strategy: Strategy,
    pub metrics: BTreeMap<String, f64>,
}

pub enum Built {
    Game(Experiment),
    /// Protocols that are exhaustive checks rather than games.
    Check { value: f64, metrics: BTreeMap<String, f64> },
}

fn expectation(m: &Mat, psi: &StateVec) -> f64 {
    let v = nalgebra::DVector::from_vec(psi.amps.clone());
    (v.adjoint() * m * &v)[(0, 0)].re
}

fn pick_state(spec: &str, h: &Mat, q: usize, n: usize) -> HResult<StateVec> {
    if let Some(d) = spec.strip_prefix("basis:") {
        let digits: Vec<Elem> = d.chars().map(|c| c.to_digit(36).filter(|&x| (x as usize) < q)).collect::<Option<_>>().ok_or_else(|| {
            HarnessError::Invalid(format!("basis state {d:?}: digits must be below q = {q}"))
        })?;
        if digits.len() != n {
            return invalid(format!("basis state length = n violated: {} digits, n = {n}", digits.len()));
        }
        return Ok(StateVec::basis_state(q, &digits));
    }
    let i = match spec {
        "ground" => 0,
        s => s
            .strip_prefix("eigen:")
            .and_then(|i| i.parse::<usize>().ok())
            .ok_or_else(|| HarnessError::Invalid(format!("state must be ground, eigen:i or basis:digits, got {spec:?}")))?,
    };
    let pairs = eigenpairs(h, q, n)?;
    pairs.into_iter().nth(i).map(|p| p.1).ok_or_else(|| HarnessError::Invalid(format!("eigenstate index {i} out of range")))
}

pub fn build(cfg: &ExperimentConfig) -> HResult<Built> {
    cfg.validate()?;
    let pr = &cfg.params;
    let f = cfg.field()?;
    let mut metrics = BTreeMap::new();
    let (game, strategy) = match cfg.protocol.name.as_str() {
        "qlowdeg" => {
            let n = pr.n.unwrap();
            let h = pr.h.unwrap_or(2);
            let m = pr.m.unwrap_or_else(|| (2..).find(|&m| (h as u128).pow(m as u32) >= n as u128).unwrap());
            let ld = LowDeg::new(f.clone(), m, pr.d.unwrap_or(h * m as u32), pr.level.unwrap_or(1))?;
            let inj = CoordInjection::new(n, h, m, f.q())?;
            let s = perturbed_strategy(&honest_pauli_strategy(&ld, &inj)?, &f, n, pr.theta.unwrap_or(0.0));
            if pr.diagnostics == Some(true) {
                let d = diagnostics(&s, &ld, &inj)?;
                metrics.insert("xz_cons".into(), d.xz_cons);
                metrics.insert("xz_ac".into(), d.xz_ac);
                metrics.insert("subspace_point".into(), d.subspace_point);
            }
            (qlowdeg_game(&ld, &inj)?, s)
        }
        "ms" => (magic_square_game(), ms_strategy()?),
        "codecheck" => {
            let code = cfg.code()?;
            let css = css_from_code(&code)?;
            let cc = CodeCheck::new(code, pr.n.unwrap(), pr.h.unwrap_or(2), pr.level.unwrap_or(1))?;
            (codecheck_game(&cc)?, codecheck_strategy(&cc, &css, None)?)
        }
        "sum" => {
            let code = cfg.code()?;
            let css = css_from_code(&code)?;
            let n = pr.n.unwrap();
            let mut sp = SumSetup::new(code, n, pr.h.unwrap_or(2))?;
            if let Some(w) = &pr.sum_weights {
                sp = sp.with_weights([w[0], w[1], w[2], w[3]])?;
            }
            let w = cfg.basis()?;
            let bs: Vec<Vec<Elem>> = pr.words.as_ref().unwrap().iter().map(|s| parse_vec(&f, s).unwrap()).collect();
            let honest = sum_strategy(&sp, &css, None)?;
            let e = word_expectation(&f, &honest.state, n + 1, &vec![w; n], &bs)?;
            metrics.insert("expectation".into(), e.re);
            let s = if pr.flip_claim == Some(true) { flipped_claim_strategy(&sp, &honest, 0, 1)? } else { honest };
            (sum_game(&sp, w, &bs)?, s)
        }
        "energy" | "xz" => {
            let code = cfg.code()?;
            let h = pr.h.unwrap_or(2);
            let q = f.q() as usize;
            let with_weights = |es: EvalSetup| -> HResult<EvalSetup> {
                Ok(match &pr.sum_weights {
                    Some(w) => es.with_sum_weights([w[0], w[1], w[2], w[3]])?,
                    None => es,
                })
            };
            match (cfg.protocol.name.as_str(), cfg.hamiltonian()?) {
                ("energy", HamFile::YFree(ham)) => {
                    let xi = pr.xi.unwrap_or(0.5);
                    let dense = ham.dense()?;
                    let psi = pick_state(pr.state.as_deref().unwrap_or("ground"), &dense, q, ham.n)?;
                    let lam = expectation(&dense, &psi);
                    let wa: f64 = ham.terms.iter().map(|t| t.weight * t.alpha.abs()).sum();
                    metrics.insert("lambda".into(), lam);
                    metrics.insert("formula".into(), (1.0 - xi) + xi / 2.0 * (wa - lam));
                    let es = with_weights(EvalSetup::new(code, ham.n, h)?)?;
                    (energy_game(&es, &ham, xi)?, es.strategy(&psi)?)
                }
                ("xz", HamFile::LinearXz(ham)) => {
                    let copies = pr.copies.unwrap_or(1);
                    let dense = ham.dense()?;
                    let psi = pick_state(pr.state.as_deref().unwrap_or("ground"), &dense, q, ham.n)?;
                    metrics.insert("energy".into(), expectation(&dense, &psi));
                    metrics.insert("lambda_min".into(), min_eig(&dense)?);
                    let es = with_weights(EvalSetup::new(code, ham.n * copies, h)?)?;
                    (xz_game(&es, &ham, copies)?, es.strategy(&tensor_power(&psi, copies))?)
                }
                (p, _) => return invalid(format!("protocol {p} needs a {} Hamiltonian", if p == "xz" { "linxz" } else { "yfree or qubit" })),
            }
        }
        "lin" => return lin_check(cfg, &f),
        "amplify" => return amplify_check(cfg),
        "subsample" => return subsample_check(cfg),
        _ => unreachable!("validated"),
    };
    Ok(Built::Game(Experiment { f, game, strategy, metrics }))
}

fn lin_check(cfg: &ExperimentConfig, f: &FieldRef) -> HResult<Built> {
    let pr = &cfg.params;
    let n = pr.n.unwrap_or(3);
    let h = pr.h.unwrap_or(2);
    let m = pr.m.unwrap_or_else(|| (2..).find(|&m| (h as u128).pow(m as u32) >= n as u128).unwrap());
    let inj = CoordInjection::new(n, h, m, f.q())?;
    let a = match &pr.message {
        Some(s) => parse_vec(f, s).map_err(HarnessError::Invalid)?,
        None => (0..n).map(|i| (i % 2 == 0) as Elem).collect(),
    };
    if a.len() != n {
        return invalid(format!("message length = n violated: {} vs {n}", a.len()));
    }
    let g = {
        let g = inj.encode(f, &a)?;
        let f = f.clone();
        move |x: &[Elem]| g.eval_unchecked(&f, x)
    };
    let honest = build_proof(f, &a, &a)?;
    let q = f.q() as usize;
    let words: Vec<Vec<Elem>> = (0..q.pow(n as u32)).map(|i| f.vec_from_index(i, n)).collect();
    let (mut honest_accept, mut wrong_reject) = (1.0f64, 1.0f64);
    for b in &words {
        let c = f.dot(b, &a);
        honest_accept = honest_accept.min(1.0 - lin_reject_prob(&honest, &g, &inj, &LinTestSpec { b: b.clone(), c })?);
        for wrong in f.elements().filter(|&x| x != c) {
            wrong_reject = wrong_reject.min(lin_reject_prob(&honest, &g, &inj, &LinTestSpec { b: b.clone(), c: wrong })?);
        }
    }
    let mut metrics = BTreeMap::from([("honest_accept".to_string(), honest_accept), ("wrong_value_reject".to_string(), wrong_reject)]);
    // every table, every b, every false claim
    let len = q.pow(n as u32);
    let tables = (q as u128).checked_pow(len as u32).filter(|&x| x <= 1 << 16);
    let mut floor = f64::NAN;
    if let Some(tables) = tables {
        floor = 1.0;
        for idx in 0..tables as usize {
            let table = f.vec_from_index(idx, len);
            let p = LinearProof::adversarial(f, n, table)?;
            for b in &words {
                let c = f.dot(b, &a);
                for wrong in f.elements().filter(|&x| x != c) {
                    floor = floor.min(lin_reject_prob(&p, &g, &inj, &LinTestSpec { b: b.clone(), c: wrong })?);
                }
            }
        }
        metrics.insert("adversarial_floor".into(), floor);
        metrics.insert("tables".into(), tables as f64);
    }
    if let Some(path) = &pr.table {
        let path = cfg.resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Config(format!("table {}: {e}", path.display())))?;
        let p = parse_table(&text)?;
        if p.n != n || p.f.q() != f.q() {
            return invalid("table dimensions differ from (n, q)");
        }
        let mut worst = 1.0f64;
        for b in &words {
            let c = f.dot(b, &a);
            for wrong in f.elements().filter(|&x| x != c) {
                worst = worst.min(lin_reject_prob(&p, &g, &inj, &LinTestSpec { b: b.clone(), c: wrong })?);
            }
        }
        metrics.insert("table_false_reject".into(), worst);
    }
    let value = if floor.is_nan() { honest_accept.min(wrong_reject) } else { floor };
    Ok(Built::Check { value, metrics })
}

fn amplify_check(cfg: &ExperimentConfig) -> HResult<Built> {
    let pr = &cfg.params;
    let f = Field::canonical(2, 1)?;
    let n = pr.n.unwrap_or(2);
    let inv_p = pr.inv_p.unwrap_or(0.1);
    let instances = pr.instances.unwrap_or(50);
    let mut metrics = BTreeMap::new();
    let (mut yes_ok, mut no_ok, mut total) = (0usize, 0usize, 0usize);
    let mut no_max = f64::NEG_INFINITY;
    let mut map_err = 0.0f64;
    for &a in pr.powers.as_deref().unwrap_or(&[2, 3]) {
        let inv_q = inv_p + 1.0 / a as f64;
        for i in 0..instances as u64 {
            let mut rng = stream_rng(cfg.protocol.seed, &format!("amplify:{a}"), i);
            let lam_yes = rng.gen_range(0.0..=inv_p);
            let yes = random_unit_hamiltonian(&f, n, lam_yes, &mut rng)?;
            let lam_no = rng.gen_range(inv_q..=1.0);
            let no = random_unit_hamiltonian(&f, n, lam_no, &mut rng)?;
            let amp = |h: &crate::ham::PauliSum| -> HResult<(f64, f64)> {
                let d = h.dense()?;
                let lam = min_eig(&d)?;
                let amped = min_eig(&gap_amplify_dense(&d, a)?)?;
                let want = 1.0 - (1.0 + 1.0 / a as f64 - lam).powi(a as i32);
                Ok((amped, (amped - want).abs()))
            };
            let (ly, ey) = amp(&yes)?;
            let (ln, en) = amp(&no)?;
            map_err = map_err.max(ey).max(en);
            if i == 0 {
                let sym = gap_amplify(&yes, a, 1 << 20)?.dense()?;
                map_err = map_err.max((&sym - gap_amplify_dense(&yes.dense()?, a)?).norm());
            }
            yes_ok += (ly <= 0.5 + 1e-12) as usize;
            no_ok += (ln >= 1.0 - 1e-12) as usize;
            no_max = no_max.max(ln);
            total += 1;
        }
    }
    let yes = yes_ok as f64 / total as f64;
    let no = no_ok as f64 / total as f64;
    metrics.insert("yes_fraction".into(), yes);
    metrics.insert("no_fraction".into(), no);
    metrics.insert("no_max_lambda".into(), no_max);
    metrics.insert("spectral_map_error".into(), map_err);
    metrics.insert("instances".into(), total as f64);
    Ok(Built::Check { value: yes.min(no), metrics })
}

fn subsample_check(cfg: &ExperimentConfig) -> HResult<Built> {
    let pr = &cfg.params;
    let f = Field::canonical(2, 1)?;
    let mut rng = stream_rng(cfg.protocol.seed, "instance", 0);
    let h = random_yfree(&f, pr.n.unwrap_or(3), pr.terms.unwrap_or(12), &mut rng)?;
    let seeds = pr.seeds.unwrap_or(200);
    let thr = pr.threshold.unwrap_or(0.15);
    let mut drift = subsample_drift(&h, pr.samples.unwrap_or(64), 0..seeds)?;
    let within = drift.iter().filter(|&&d| d <= thr).count() as f64 / drift.len() as f64;
    drift.sort_by(f64::total_cmp);
    let metrics = BTreeMap::from([
        ("fraction_within".to_string(), within),
        ("median_drift".to_string(), drift[drift.len() / 2]),
        ("max_drift".to_string(), *drift.last().unwrap()),
    ]);
    Ok(Built::Check { value: within, metrics })
}

// ---------------------------------------------------------------- running

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: String,
    pub mode: RunMode,
    pub fingerprint: String,
    pub value: f64,
    pub report: Option<AcceptanceReport>,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<WireFailure>,
}

impl RunReport {
    fn new(cfg: &ExperimentConfig, value: f64, report: Option<AcceptanceReport>, metrics: BTreeMap<String, f64>) -> Self {
        Self { protocol: cfg.protocol.name.clone(), mode: cfg.protocol.mode, fingerprint: cfg.fingerprint(), value, report, metrics, error: None }
    }
}

/// Exact or sampled evaluation; sampled runs are deterministic under (config, seed).
pub fn run(cfg: &ExperimentConfig) -> HResult<RunReport> {
    match build(cfg)? {
        Built::Check { value, metrics } => Ok(RunReport::new(cfg, value, None, metrics)),
        Built::Game(ex) => {
            let rep = match cfg.protocol.mode {
                RunMode::Exact => exact_value(&ex.game, &ex.strategy)?,
                RunMode::Mc => mc_run(&ex.game, &ex.strategy, cfg.protocol.trials, cfg.protocol.seed)?.0,
            };
            Ok(RunReport::new(cfg, rep.value, Some(rep), ex.metrics))
        }
    }
}

/// Sampled run through the wire-message path with an in-process prover.
pub fn run_with_transcript(cfg: &ExperimentConfig) -> HResult<(RunReport, Transcript)> {
    let ex = game_of(cfg)?;
    let mut prover = LocalProver::new(ex.f.clone(), ex.strategy.clone(), cfg.protocol.seed);
    let out = drive(cfg, &ex, &mut prover);
    Ok(finish(cfg, &ex, out))
}

fn game_of(cfg: &ExperimentConfig) -> HResult<Experiment> {
    match build(cfg)? {
        Built::Game(ex) => Ok(ex),
        Built::Check { .. } => invalid(format!("protocol {} is a check, not a game; it has no transcript", cfg.protocol.name)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub at: String,
    pub report: RunReport,
}

/// One run per value of `axis`; an empty value list is a single run of the template.
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> HResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Ok(vec![SweepRow { axis: axis.into(), at: String::new(), report: run(cfg)? }]);
    }
    values
        .iter()
        .map(|v| Ok(SweepRow { axis: axis.into(), at: v.clone(), report: run(&cfg.with_param(axis, v)?)? }))
        .collect()
}

// ---------------------------------------------------------------- output

/// Compact JSON with sorted keys.
pub fn to_json<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x).expect("serializable").to_string()
}

fn flat_row(r: &RunReport) -> BTreeMap<String, String> {
    let mut row = BTreeMap::new();
    row.insert("protocol".into(), r.protocol.clone());
    row.insert("mode".into(), format!("{:?}", r.mode).to_lowercase());
    row.insert("fingerprint".into(), r.fingerprint.clone());
    row.insert("value".into(), r.value.to_string());
    if let Some(rep) = &r.report {
        row.insert("std_err".into(), rep.std_err.to_string());
        row.insert("trials".into(), rep.trials.to_string());
        for b in &rep.branches {
            row.insert(format!("branch:{}", b.name), b.value.to_string());
        }
    }
    for (k, v) in &r.metrics {
        row.insert(format!("metric:{k}"), v.to_string());
    }
    row.insert("error".into(), r.error.as_ref().map(|e| format!("{:?}", e.kind).to_lowercase()).unwrap_or_default());
    row
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn to_csv(rows: Vec<BTreeMap<String, String>>) -> String {
    let mut cols: Vec<String> = vec![];
    for r in &rows {
        for k in r.keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    let mut out = cols.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",") + "\n";
    for r in &rows {
        let line: Vec<String> = cols.iter().map(|c| csv_cell(r.get(c).map(String::as_str).unwrap_or(""))).collect();
        out += &(line.join(",") + "\n");
    }
    out
}

pub fn report_csv(r: &RunReport) -> String {
    to_csv(vec![flat_row(r)])
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    to_csv(
        rows.iter()
            .map(|s| {
                let mut r = flat_row(&s.report);
                r.insert(s.axis.clone(), s.at.clone());
                r
            })
            .collect(),
    )
}

// ---------------------------------------------------------------- wire codec

/// Canonical JSON forms of questions and answers: field elements as p-ary digit
/// strings (lowest power first), vectors as arrays of them, subspaces as
/// {base, basis}, curves as per-coordinate coefficient lists.
pub struct Codec {
    f: FieldRef,
}

type DecodeResult<T> = Result<T, String>;

fn get<'a>(v: &'a Value, k: &str) -> DecodeResult<&'a Value> {
    v.get(k).ok_or_else(|| format!("missing field {k:?}"))
}

fn as_u64(v: &Value) -> DecodeResult<u64> {
    v.as_u64().ok_or_else(|| format!("expected an unsigned integer, got {v}"))
}

fn as_arr(v: &Value) -> DecodeResult<&Vec<Value>> {
    v.as_array().ok_or_else(|| format!("expected an array, got {v}"))
}

fn as_str(v: &Value) -> DecodeResult<&str> {
    v.as_str().ok_or_else(|| format!("expected a string, got {v}"))
}

impl Codec {
    pub fn new(f: FieldRef) -> Self {
        Self { f }
    }

    fn el(&self, a: Elem) -> Value {
        Value::String(show_elem(&self.f, a))
    }

    fn el_of(&self, v: &Value) -> DecodeResult<Elem> {
        parse_elem(&self.f, as_str(v)?)
    }

    fn vec(&self, v: &[Elem]) -> Value {
        Value::Array(v.iter().map(|&a| self.el(a)).collect())
    }

    fn vec_of(&self, v: &Value) -> DecodeResult<Vec<Elem>> {
        as_arr(v)?.iter().map(|x| self.el_of(x)).collect()
    }

    fn basis(b: Basis) -> Value {
        Value::String(if b == Basis::X { "X" } else { "Z" }.into())
    }

    fn basis_of(v: &Value) -> DecodeResult<Basis> {
        match as_str(v)? {
            "X" => Ok(Basis::X),
            "Z" => Ok(Basis::Z),
            s => Err(format!("bad basis {s:?}")),
        }
    }

    fn sub(&self, s: &AffineSubspace) -> Value {
        json!({ "base": self.vec(&s.base), "basis": s.basis.iter().map(|b| self.vec(b)).collect::<Vec<_>>() })
    }

    fn sub_of(&self, v: &Value) -> DecodeResult<AffineSubspace> {
        let base = self.vec_of(get(v, "base")?)?;
        let basis = as_arr(get(v, "basis")?)?.iter().map(|b| self.vec_of(b)).collect::<DecodeResult<Vec<_>>>()?;
        if basis.iter().any(|b| b.len() != base.len()) {
            return Err("subspace directions differ in length from the base".into());
        }
        Ok(AffineSubspace { base, basis })
    }

    fn curve(&self, c: &Curve) -> Value {
        json!({ "coeffs": c.components.iter().map(|x| self.vec(x)).collect::<Vec<_>>(), "degree": c.degree })
    }

    fn curve_of(&self, v: &Value) -> DecodeResult<Curve> {
        let components = as_arr(get(v, "coeffs")?)?.iter().map(|x| self.vec_of(x)).collect::<DecodeResult<Vec<_>>>()?;
        Ok(Curve { components, degree: as_u64(get(v, "degree")?)? as usize })
    }

    fn curves(&self, g: &[(Curve, Curve)]) -> Value {
        Value::Array(g.iter().map(|(a, b)| json!([self.curve(a), self.curve(b)])).collect())
    }

    fn curves_of(&self, v: &Value) -> DecodeResult<Vec<(Curve, Curve)>> {
        as_arr(v)?
            .iter()
            .map(|p| match as_arr(p)?.as_slice() {
                [a, b] => Ok((self.curve_of(a)?, self.curve_of(b)?)),
                _ => Err("curve pair must have two entries".into()),
            })
            .collect()
    }

    fn ctx(&self, c: &PairCtx) -> Value {
        json!({ "u": self.el(c.u), "u2": self.el(c.u2), "wx": Self::basis(c.wx), "x": self.vec(&c.x), "z": self.vec(&c.z) })
    }

    fn ctx_of(&self, v: &Value) -> DecodeResult<PairCtx> {
        Ok(PairCtx {
            x: self.vec_of(get(v, "x")?)?,
            z: self.vec_of(get(v, "z")?)?,
            u: self.el_of(get(v, "u")?)?,
            u2: self.el_of(get(v, "u2")?)?,
            wx: Self::basis_of(get(v, "wx")?)?,
        })
    }

    pub fn question(&self, q: &Question) -> Value {
        match q {
            Question::Com(i) => json!({ "kind": "com", "index": i }),
            Question::Ms { ctx, slot } => {
                let mut v = json!({ "kind": "ms", "ctx": ctx.as_ref().map(|c| self.ctx(c)) });
                match slot {
                    MsSlot::Line(l) => v["line"] = json!(l),
                    MsSlot::Cell(r, c) => v["cell"] = json!([r, c]),
                }
                v
            }
            Question::Sub { basis, s } => json!({ "kind": "sub", "basis": Self::basis(*basis), "s": self.sub(s) }),
            Question::Inner { basis, s, inner } => {
                json!({ "kind": "inner", "basis": Self::basis(*basis), "s": self.sub(s), "inner": self.sub(inner) })
            }
            Question::Pair(c) => json!({ "kind": "pair", "ctx": self.ctx(c) }),
            Question::Sum { basis, b, query } => {
                let query = match query {
                    SumQuery::Pair { s, s2 } => json!({ "kind": "pair", "s": self.sub(s), "s2": self.sub(s2) }),
                    SumQuery::Points { y, y2 } => json!({ "kind": "points", "y": self.vec(y), "y2": self.vec(y2) }),
                    SumQuery::Subst { c, z, c2, z2 } => json!({
                        "kind": "subst", "c": self.curve(c), "z": self.vec(z), "c2": self.curve(c2), "z2": self.vec(z2)
                    }),
                    SumQuery::Curves { g, h } => json!({ "kind": "curves", "g": self.curves(g), "h": self.curves(h) }),
                };
                json!({ "kind": "sum", "basis": Self::basis(*basis), "b": self.vec(b), "query": query })
            }
            Question::Framed { set, inner } => json!({ "kind": "framed", "set": set, "inner": self.question(inner) }),
            Question::Tag(t) => json!({ "kind": "tag", "tag": t }),
        }
    }

    pub fn question_of(&self, v: &Value) -> DecodeResult<Question> {
        Ok(match as_str(get(v, "kind")?)? {
            "com" => Question::Com(u8::try_from(as_u64(get(v, "index")?)?).map_err(|e| e.to_string())?),
            "ms" => {
                let ctx = match get(v, "ctx")? {
                    Value::Null => None,
                    c => Some(self.ctx_of(c)?),
                };
                let small = |x: &Value| -> DecodeResult<u8> { u8::try_from(as_u64(x)?).map_err(|e| e.to_string()) };
                let slot = match (v.get("line"), v.get("cell")) {
                    (Some(l), None) => MsSlot::Line(small(l)?),
                    (None, Some(c)) => match as_arr(c)?.as_slice() {
                        [r, c] => MsSlot::Cell(small(r)?, small(c)?),
                        _ => return Err("cell needs two indices".into()),
                    },
                    _ => return Err("ms question needs exactly one of line, cell".into()),
                };
                Question::Ms { ctx, slot }
            }
            "sub" => Question::Sub { basis: Self::basis_of(get(v, "basis")?)?, s: self.sub_of(get(v, "s")?)? },
            "inner" => Question::Inner {
                basis: Self::basis_of(get(v, "basis")?)?,
                s: self.sub_of(get(v, "s")?)?,
                inner: self.sub_of(get(v, "inner")?)?,
            },
            "pair" => Question::Pair(self.ctx_of(get(v, "ctx")?)?),
            "sum" => {
                let q = get(v, "query")?;
                let query = match as_str(get(q, "kind")?)? {
                    "pair" => SumQuery::Pair { s: self.sub_of(get(q, "s")?)?, s2: self.sub_of(get(q, "s2")?)? },
                    "points" => SumQuery::Points { y: self.vec_of(get(q, "y")?)?, y2: self.vec_of(get(q, "y2")?)? },
                    "subst" => SumQuery::Subst {
                        c: self.curve_of(get(q, "c")?)?,
                        z: self.vec_of(get(q, "z")?)?,
                        c2: self.curve_of(get(q, "c2")?)?,
                        z2: self.vec_of(get(q, "z2")?)?,
                    },
                    "curves" => SumQuery::Curves { g: self.curves_of(get(q, "g")?)?, h: self.curves_of(get(q, "h")?)? },
                    k => return Err(format!("unknown sum query {k:?}")),
                };
                Question::Sum { basis: Self::basis_of(get(v, "basis")?)?, b: self.vec_of(get(v, "b")?)?, query }
            }
            "framed" => Question::Framed {
                set: as_arr(get(v, "set")?)?.iter().map(|x| as_u64(x).map(|x| x as usize)).collect::<DecodeResult<_>>()?,
                inner: Box::new(self.question_of(get(v, "inner")?)?),
            },
            "tag" => Question::Tag(as_str(get(v, "tag")?)?.to_string()),
            k => return Err(format!("unknown question kind {k:?}")),
        })
    }

    pub fn answer(&self, a: &Answer) -> Value {
        match a {
            Answer::Value(x) => json!({ "kind": "value", "value": self.el(*x) }),
            Answer::Bits(b) => json!({ "kind": "bits", "bits": b }),
            Answer::Poly(p) => json!({
                "kind": "poly",
                "vars": p.num_vars,
                "terms": p.terms.iter().map(|(e, &c)| json!([e, self.el(c)])).collect::<Vec<_>>(),
            }),
            Answer::Tuple(t) => json!({ "kind": "tuple", "items": t.iter().map(|x| self.answer(x)).collect::<Vec<_>>() }),
            Answer::Null => json!({ "kind": "null" }),
        }
    }

    pub fn answer_of(&self, v: &Value) -> DecodeResult<Answer> {
        Ok(match as_str(get(v, "kind")?)? {
            "value" => Answer::Value(self.el_of(get(v, "value")?)?),
            "bits" => Answer::Bits(
                as_arr(get(v, "bits")?)?
                    .iter()
                    .map(|x| as_u64(x).and_then(|x| u32::try_from(x).map_err(|e| e.to_string())))
                    .collect::<DecodeResult<_>>()?,
            ),
            "poly" => {
                let vars = as_u64(get(v, "vars")?)? as usize;
                let mut terms = BTreeMap::new();
                for t in as_arr(get(v, "terms")?)? {
                    let [e, c] = as_arr(t)?.as_slice() else { return Err("poly term must be [exponents, coefficient]".into()) };
                    let e: Vec<u32> = as_arr(e)?
                        .iter()
                        .map(|x| as_u64(x).and_then(|x| u32::try_from(x).map_err(|e| e.to_string())))
                        .collect::<DecodeResult<_>>()?;
                    if e.len() != vars {
                        return Err("exponent vector length differs from vars".into());
                    }
                    let c = self.el_of(c)?;
                    if c != 0 && terms.insert(e, c).is_some() {
                        return Err("repeated monomial".into());
                    }
                }
                Answer::Poly(MultiPoly { num_vars: vars, terms })
            }
            "tuple" => Answer::Tuple(as_arr(get(v, "items")?)?.iter().map(|x| self.answer_of(x)).collect::<DecodeResult<_>>()?),
            "null" => Answer::Null,
            k => return Err(format!("unknown answer kind {k:?}")),
        })
    }
}

// ---------------------------------------------------------------- transcript records

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToProver,
    ToVerifier,
}

/// One NDJSON line, on the wire or in a transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Hello { version: u32, fingerprint: String },
    Start { version: u32, fingerprint: String, protocol: String, seed: u64, trials: u64, players: usize },
    Message { round: u64, direction: Direction, player: usize, payload: Value },
    Verdict { round: u64, index: usize, branch: String, accept: bool, value: Option<f64> },
    Result { value: f64 },
    Error { kind: WireErrorKind, detail: String },
    Bye,
}

impl Record {
    pub fn line(&self) -> String {
        to_json(self)
    }
}

/// Ordered records: a start header, per round the questions, answers and
/// verdict, then the final result.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub records: Vec<Record>,
}

impl Transcript {
    pub fn to_ndjson(&self) -> String {
        self.records.iter().map(|r| r.line() + "\n").collect()
    }

    pub fn from_ndjson(text: &str) -> HResult<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("transcript line {}: {e}", i + 1))))
            .collect::<HResult<_>>()?;
        Ok(Self { records })
    }
}

// ---------------------------------------------------------------- verifier side

/// Something that answers one round of questions (given as wire payloads).
pub trait Endpoint {
    fn exchange(&mut self, round: u64, questions: &[Value]) -> Result<Vec<Value>, WireFailure>;
}

/// In-process prover: samples the joint outcome exactly as `mc_run` does.
pub struct LocalProver {
    codec: Codec,
    strategy: Strategy,
    seed: u64,
    cache: HashMap<Vec<Question>, (Vec<Arc<LocalMeasurement>>, OutcomeDist)>,
}

impl LocalProver {
    pub fn new(f: FieldRef, strategy: Strategy, seed: u64) -> Self {
        Self { codec: Codec::new(f), strategy, seed, cache: HashMap::new() }
    }

    pub fn answer(&mut self, round: u64, questions: &[Value]) -> Result<Vec<Value>, WireFailure> {
        let qs: Vec<Question> = questions
            .iter()
            .map(|v| self.codec.question_of(v))
            .collect::<Result<_, _>>()
            .map_err(|e| WireFailure::new(WireErrorKind::Malformed, format!("question: {e}")))?;
        if !self.cache.contains_key(&qs) {
            let d = question_dist(&self.strategy, &qs).map_err(|e| WireFailure::new(WireErrorKind::Malformed, e.to_string()))?;
            self.cache.insert(qs.clone(), d);
        }
        let (ms, d) = &self.cache[&qs];
        let ids = sample_outcome(d, self.seed, round);
        Ok(ids.iter().zip(ms).map(|(&k, m)| self.codec.answer(&m.labels[k as usize])).collect())
    }
}

impl Endpoint for LocalProver {
    fn exchange(&mut self, round: u64, questions: &[Value]) -> Result<Vec<Value>, WireFailure> {
        self.answer(round, questions)
    }
}

fn start_record(cfg: &ExperimentConfig, ex: &Experiment) -> Record {
    Record::Start {
        version: WIRE_VERSION,
        fingerprint: cfg.fingerprint(),
        protocol: cfg.protocol.name.clone(),
        seed: cfg.protocol.seed,
        trials: cfg.protocol.trials,
        players: ex.game.players,
    }
}

struct Drive {
    records: Vec<Record>,
    trials: Vec<TrialRecord>,
    failure: Option<WireFailure>,
}

/// Verifier loop shared by in-process and wire provers.
fn drive(cfg: &ExperimentConfig, ex: &Experiment, ep: &mut dyn Endpoint) -> Drive {
    let (seed, n) = (cfg.protocol.seed, cfg.protocol.trials);
    let codec = Codec::new(ex.f.clone());
    let alloc = allocate(&ex.game, n);
    let sampler = RoundSampler::new(&ex.game, &alloc);
    let mut out = Drive { records: vec![start_record(cfg, ex)], trials: vec![], failure: None };
    for trial in 0..n {
        let ri = sampler.round(seed, trial);
        let round = &ex.game.rounds[ri];
        let payloads: Vec<Value> = round.questions.iter().map(|q| codec.question(q)).collect();
        for (player, p) in payloads.iter().enumerate() {
            out.records.push(Record::Message { round: trial, direction: Direction::ToProver, player, payload: p.clone() });
        }
        let replies = match ep.exchange(trial, &payloads) {
            Ok(r) => r,
            Err(e) => {
                out.failure = Some(e);
                return out;
            }
        };
        for (player, p) in replies.iter().enumerate() {
            out.records.push(Record::Message { round: trial, direction: Direction::ToVerifier, player, payload: p.clone() });
        }
        let (answers, accept, value) = decide(ex, &codec, ri, &replies, seed, trial);
        out.records.push(Record::Verdict { round: trial, index: ri, branch: round.branch.clone(), accept, value });
        out.trials.push(TrialRecord { trial, round: ri, branch: round.branch.clone(), questions: round.questions.clone(), answers, accept, value });
    }
    out
}

/// Undecodable answers count as Null, which no predicate accepts.
fn decide(ex: &Experiment, codec: &Codec, ri: usize, replies: &[Value], seed: u64, trial: u64) -> (Vec<Answer>, bool, Option<f64>) {
    let answers: Vec<Answer> = replies.iter().map(|v| codec.answer_of(v).unwrap_or(Answer::Null)).collect();
    let refs: Vec<&Answer> = answers.iter().collect();
    let v = (ex.game.rounds[ri].decide)(&refs);
    let accept = sample_accept(&v, seed, trial);
    (answers, accept, v.value)
}

fn finish(cfg: &ExperimentConfig, ex: &Experiment, mut d: Drive) -> (RunReport, Transcript) {
    let mut rep = RunReport::new(cfg, 0.0, None, ex.metrics.clone());
    rep.mode = RunMode::Mc;
    match d.failure.take() {
        Some(e) => rep.error = Some(e),
        None => {
            let r = mc_report(&ex.game, &allocate(&ex.game, cfg.protocol.trials), &d.trials, Some(cfg.protocol.seed));
            rep.value = r.value;
            d.records.push(Record::Result { value: r.value });
            rep.report = Some(r);
        }
    }
    (rep, Transcript { records: d.records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rounds: u64,
    /// Rounds whose recomputed questions or verdict differ from the record.
    pub mismatches: Vec<u64>,
    pub value: Option<f64>,
    pub recorded_value: Option<f64>,
}

/// Recomputes every question and verdict of a transcript from the config and the recorded answers.
pub fn replay(cfg: &ExperimentConfig, t: &Transcript) -> HResult<ReplayReport> {
    let ex = game_of(cfg)?;
    let codec = Codec::new(ex.f.clone());
    let Some(Record::Start { fingerprint, seed, trials, .. }) = t.records.first() else {
        return Err(HarnessError::Config("transcript does not begin with a start record".into()));
    };
    if *fingerprint != cfg.fingerprint() {
        return invalid(format!("transcript fingerprint {fingerprint} differs from config {}", cfg.fingerprint()));
    }
    let (seed, trials) = (*seed, *trials);
    let alloc = allocate(&ex.game, trials);
    let sampler = RoundSampler::new(&ex.game, &alloc);
    let mut asked: BTreeMap<u64, Vec<Value>> = BTreeMap::new();
    let mut replies: BTreeMap<u64, Vec<Value>> = BTreeMap::new();
    let mut mismatches = vec![];
    let mut records = vec![];
    let mut recorded_value = None;
    for r in &t.records {
        match r {
            Record::Message { round, direction: Direction::ToProver, payload, .. } => asked.entry(*round).or_default().push(payload.clone()),
            Record::Message { round, direction: Direction::ToVerifier, payload, .. } => replies.entry(*round).or_default().push(payload.clone()),
            Record::Verdict { round, index, accept, value, .. } => {
                let ri = sampler.round(seed, *round);
                let want: Vec<Value> = ex.game.rounds[ri].questions.iter().map(|q| codec.question(q)).collect();
                let got = replies.get(round).cloned().unwrap_or_default();
                let (answers, acc, val) = decide(&ex, &codec, ri, &got, seed, *round);
                let same_value = match (val, value) {
                    (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
                    (None, None) => true,
                    _ => false,
                };
                if ri != *index || asked.get(round) != Some(&want) || acc != *accept || !same_value {
                    mismatches.push(*round);
                }
                let round_ref = &ex.game.rounds[ri];
                records.push(TrialRecord { trial: *round, round: ri, branch: round_ref.branch.clone(), questions: round_ref.questions.clone(), answers, accept: acc, value: val });
            }
            Record::Result { value } => recorded_value = Some(*value),
            _ => {}
        }
    }
    let complete = records.len() as u64 == trials;
    let value = complete.then(|| mc_report(&ex.game, &alloc, &records, Some(seed)).value);
    Ok(ReplayReport { rounds: records.len() as u64, mismatches, value, recorded_value })
}

// ---------------------------------------------------------------- wire transport

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn io_failure(e: std::io::Error) -> WireFailure {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => WireFailure::new(WireErrorKind::Timeout, "read timed out"),
        ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe | ErrorKind::UnexpectedEof => {
            WireFailure::new(WireErrorKind::Timeout, format!("connection lost: {e}"))
        }
        _ => WireFailure::new(WireErrorKind::Io, e.to_string()),
    }
}

impl Conn {
    fn new(s: TcpStream, timeout: Option<Duration>) -> Result<Self, WireFailure> {
        s.set_read_timeout(timeout).map_err(io_failure)?;
        s.set_nodelay(true).ok();
        let writer = s.try_clone().map_err(io_failure)?;
        Ok(Self { reader: BufReader::new(s), writer })
    }

    fn send(&mut self, r: &Record) -> Result<(), WireFailure> {
        self.writer.write_all((r.line() + "\n").as_bytes()).map_err(io_failure)
    }

    /// Next record; a closed connection counts as a timeout.
    fn recv(&mut self) -> Result<Record, WireFailure> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.reader.read_line(&mut line).map_err(io_failure)?;
            if n == 0 {
                return Err(WireFailure::new(WireErrorKind::Timeout, "connection closed by peer"));
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        serde_json::from_str(line.trim()).map_err(|e| WireFailure::new(WireErrorKind::Malformed, format!("{e}: {:?}", line.trim())))
    }
}

/// Verifier-side view of a remote prover.
struct RemoteProver {
    conn: Conn,
}

impl Endpoint for RemoteProver {
    fn exchange(&mut self, round: u64, questions: &[Value]) -> Result<Vec<Value>, WireFailure> {
        for (player, p) in questions.iter().enumerate() {
            self.conn.send(&Record::Message { round, direction: Direction::ToProver, player, payload: p.clone() })?;
        }
        let mut out = Vec::with_capacity(questions.len());
        for player in 0..questions.len() {
            match self.conn.recv()? {
                Record::Message { round: r, direction: Direction::ToVerifier, player: p, payload } if r == round && p == player => {
                    out.push(payload)
                }
                Record::Error { kind, detail } => return Err(WireFailure::new(kind, format!("prover: {detail}"))),
                other => {
                    return Err(WireFailure::new(
                        WireErrorKind::Malformed,
                        format!("expected the answer of player {player} in round {round}, got {}", other.line()),
                    ))
                }
            }
        }
        Ok(out)
    }
}

/// Accepts one prover connection and runs the sampled game over it.
pub fn serve(listener: &TcpListener, cfg: &ExperimentConfig, timeout: Duration) -> HResult<(RunReport, Transcript)> {
    let ex = game_of(cfg)?;
    let (stream, _) = listener.accept()?;
    let fail = |e: WireFailure| -> HResult<(RunReport, Transcript)> {
        let mut rep = RunReport::new(cfg, 0.0, None, ex.metrics.clone());
        rep.mode = RunMode::Mc;
        rep.error = Some(e);
        Ok((rep, Transcript { records: vec![start_record(cfg, &ex)] }))
    };
    let mut conn = match Conn::new(stream, Some(timeout)) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match conn.recv() {
        Ok(Record::Hello { version, fingerprint }) => {
            let problem = if version != WIRE_VERSION {
                Some(WireFailure::new(WireErrorKind::VersionMismatch, format!("prover speaks version {version}, verifier {WIRE_VERSION}")))
            } else if fingerprint != cfg.fingerprint() {
                Some(WireFailure::new(WireErrorKind::ConfigMismatch, format!("prover config {fingerprint}, verifier {}", cfg.fingerprint())))
            } else {
                None
            };
            if let Some(p) = problem {
                let _ = conn.send(&Record::Error { kind: p.kind, detail: p.detail.clone() });
                return fail(p);
            }
        }
        Ok(other) => return fail(WireFailure::new(WireErrorKind::Malformed, format!("expected hello, got {}", other.line()))),
        Err(e) => return fail(e),
    }
    if let Err(e) = conn.send(&start_record(cfg, &ex)) {
        return fail(e);
    }
    let mut remote = RemoteProver { conn };
    let d = drive(cfg, &ex, &mut remote);
    if d.failure.is_none() {
        let _ = remote.conn.send(&Record::Bye);
    } else if let Some(f) = &d.failure {
        let _ = remote.conn.send(&Record::Error { kind: f.kind, detail: f.detail.clone() });
    }
    Ok(finish(cfg, &ex, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Honest,
    /// Well-formed messages with undecodable payloads.
    Garbage,
    /// Reads questions and never answers.
    Silent,
    /// Closes the connection right after the handshake.
    Drop,
}

impl std::str::FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "honest" => Ok(Self::Honest),
            "garbage" => Ok(Self::Garbage),
            "silent" => Ok(Self::Silent),
            "drop" => Ok(Self::Drop),
            _ => Err(format!("unknown behavior {s:?}; expected honest, garbage, silent or drop")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProverSummary {
    pub rounds: u64,
    pub error: Option<WireFailure>,
}

/// Connects to a verifier and plays every player of the configured strategy.
pub fn run_prover(addr: impl ToSocketAddrs, cfg: &ExperimentConfig, behavior: Behavior, version: u32, timeout: Duration) -> HResult<ProverSummary> {
    let ex = game_of(cfg)?;
    let stream = TcpStream::connect(addr)?;
    let mut conn = Conn::new(stream, Some(timeout)).map_err(HarnessError::Wire)?;
    let summary = |rounds: u64, error: Option<WireFailure>| -> HResult<ProverSummary> { Ok(ProverSummary { rounds, error }) };
    if let Err(e) = conn.send(&Record::Hello { version, fingerprint: cfg.fingerprint() }) {
        return summary(0, Some(e));
    }
    let (seed, players) = match conn.recv() {
        Ok(Record::Start { seed, players, .. }) => (seed, players),
        Ok(Record::Error { kind, detail }) => return summary(0, Some(WireFailure::new(kind, detail))),
        Ok(other) => return summary(0, Some(WireFailure::new(WireErrorKind::Malformed, format!("expected start, got {}", other.line())))),
        Err(e) => return summary(0, Some(e)),
    };
    if behavior == Behavior::Drop {
        let _ = conn.writer.shutdown(std::net::Shutdown::Both);
        return summary(0, None);
    }
    let mut local = LocalProver::new(ex.f.clone(), ex.strategy.clone(), seed);
    let mut rounds = 0;
    loop {
        let mut qs = Vec::with_capacity(players);
        let mut round = 0;
        while qs.len() < players {
            match conn.recv() {
                Ok(Record::Message { round: r, direction: Direction::ToProver, payload, .. }) => {
                    round = r;
                    qs.push(payload);
                }
                Ok(Record::Bye) => return summary(rounds, None),
                Ok(Record::Error { kind, detail }) => return summary(rounds, Some(WireFailure::new(kind, detail))),
                Ok(other) => return summary(rounds, Some(WireFailure::new(WireErrorKind::Malformed, format!("unexpected {}", other.line())))),
                Err(e) => return summary(rounds, Some(e)),
            }
        }
        let answers = match behavior {
            Behavior::Honest => match local.answer(round, &qs) {
                Ok(a) => a,
                Err(e) => {
                    let _ = conn.send(&Record::Error { kind: e.kind, detail: e.detail.clone() });
                    return summary(rounds, Some(e));
                }
            },
            Behavior::Garbage => (0..players).map(|j| json!({ "kind": "value", "value": format!("?{round}.{j}") })).collect(),
            Behavior::Silent => continue,
            Behavior::Drop => unreachable!(),
        };
        for (player, payload) in answers.into_iter().enumerate() {
            if let Err(e) = conn.send(&Record::Message { round, direction: Direction::ToVerifier, player, payload }) {
                return summary(rounds, Some(e));
            }
        }
        rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::exact_value;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text, None).unwrap()
    }

    const QLD: &str = "[protocol]\nname = \"qlowdeg\"\n[params]\nn = 2\nh = 2\nm = 2\n";

    #[test]
    fn unknown_keys_and_constraints_are_named() {
        let e = ExperimentConfig::parse("[protocol]\nname = \"qlowdeg\"\nspeed = 1\n", None).unwrap_err();
        assert!(e.to_string().contains("speed"), "{e}");
        let e = ExperimentConfig::parse("[protocol]\nname = \"qlowdeg\"\n[params]\nn = 5\nh = 2\nm = 2\n", None).unwrap_err();
        assert!(e.to_string().contains("h^m >= n"), "{e}");
        let e = ExperimentConfig::parse("[protocol]\nname = \"qlowdeg\"\n[params]\nn = 2\np = 3\n", None).unwrap_err();
        assert!(e.to_string().contains("p = 2"), "{e}");
        let e = ExperimentConfig::parse("[protocol]\nname = \"qlowdeg\"\n[params]\nn = 12\n", None).unwrap_err();
        assert!(e.to_string().contains("state cap"), "{e}");
        let e = ExperimentConfig::parse("[protocol]\nname = \"nope\"\n", None).unwrap_err();
        assert!(e.to_string().contains("unknown protocol"), "{e}");
    }

    #[test]
    fn fingerprint_ignores_seed_and_tracks_params() {
        let a = cfg(QLD);
        let mut b = a.clone();
        b.protocol.seed = 9;
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), a.with_param("theta", "0.1").unwrap().fingerprint());
        assert_eq!(cfg(&a.to_toml()), a);
    }

    #[test]
    fn with_param_parses_toml_values() {
        let a = cfg(QLD);
        assert_eq!(a.with_param("theta", "0.3").unwrap().params.theta, Some(0.3));
        assert_eq!(a.with_param("seed", "7").unwrap().protocol.seed, 7);
        assert!(a.with_param("bogus", "1").is_err());
        assert!(a.with_param("m", "1").unwrap_err().to_string().contains("m >= 2"));
    }

    #[test]
    fn codec_round_trips_every_question_of_a_sum_game() {
        let c = cfg("[protocol]\nname = \"sum\"\n[params]\ncode = \"epr\"\nn = 2\nwords = [\"1,0\", \"1,1\"]\n");
        let Built::Game(ex) = build(&c).unwrap() else { panic!() };
        let codec = Codec::new(ex.f.clone());
        for r in ex.game.rounds.iter().step_by(37) {
            for q in &r.questions {
                let v = codec.question(q);
                assert_eq!(&codec.question_of(&serde_json::from_str(&v.to_string()).unwrap()).unwrap(), q);
            }
        }
        let mut lp = LocalProver::new(ex.f.clone(), ex.strategy.clone(), 1);
        let r = &ex.game.rounds[0];
        let ans = lp.answer(0, &r.questions.iter().map(|q| codec.question(q)).collect::<Vec<_>>()).unwrap();
        for a in &ans {
            let dec = codec.answer_of(a).unwrap();
            assert_eq!(&codec.answer(&dec), a);
        }
        assert!(codec.answer_of(&json!({"kind": "value", "value": "7"})).is_err());
        assert!(codec.question_of(&json!({"kind": "wat"})).is_err());
    }

    #[test]
    fn gf4_elements_are_digit_strings() {
        let f = Field::canonical(2, 2).unwrap();
        let codec = Codec::new(f.clone());
        let all: Vec<Value> = f.elements().map(|a| codec.el(a)).collect();
        assert_eq!(all, vec![json!("00"), json!("10"), json!("01"), json!("11")]);
        for a in f.elements() {
            assert_eq!(codec.el_of(&codec.el(a)).unwrap(), a);
        }
    }

    #[test]
    fn same_seed_same_report_and_transcript_matches_engine() {
        let mut c = cfg(QLD);
        c.protocol.mode = RunMode::Mc;
        c.protocol.trials = 300;
        c.protocol.seed = 11;
        let a = run(&c).unwrap();
        assert_eq!(a, run(&c).unwrap());
        let (b, t) = run_with_transcript(&c).unwrap();
        assert_eq!(a.report, b.report);
        let rep = replay(&c, &t).unwrap();
        assert!(rep.mismatches.is_empty());
        assert_eq!(rep.value.map(f64::to_bits), Some(a.value.to_bits()));
        assert_eq!(Transcript::from_ndjson(&t.to_ndjson()).unwrap(), t);
    }

    #[test]
    fn tampered_transcript_is_detected() {
        let mut c = cfg("[protocol]\nname = \"ms\"\n");
        c.protocol.mode = RunMode::Mc;
        c.protocol.trials = 50;
        let (_, mut t) = run_with_transcript(&c).unwrap();
        let i = t.records.iter().position(|r| matches!(r, Record::Verdict { .. })).unwrap();
        if let Record::Verdict { accept, .. } = &mut t.records[i] {
            *accept = !*accept;
        }
        assert_eq!(replay(&c, &t).unwrap().mismatches, vec![0]);
    }

    #[test]
    fn exact_run_of_honest_ms_is_one() {
        let r = run(&cfg("[protocol]\nname = \"ms\"\n")).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        let Built::Game(ex) = build(&cfg("[protocol]\nname = \"ms\"\n")).unwrap() else { panic!() };
        assert_eq!(r.report.unwrap(), exact_value(&ex.game, &ex.strategy).unwrap());
    }

    #[test]
    fn sweep_rows_and_csv() {
        let c = cfg(QLD);
        let rows = sweep(&c, "theta", &["0".into(), "0.3".into()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].report.value > rows[1].report.value);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().next().unwrap().contains("theta"));
        assert_eq!(sweep(&c, "theta", &[]).unwrap().len(), 1);
    }

    fn serve_with(c: &ExperimentConfig, pc: &ExperimentConfig, behavior: Behavior, version: u32) -> (RunReport, Transcript, ProverSummary) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let pc = pc.clone();
        let h = std::thread::spawn(move || run_prover(addr, &pc, behavior, version, Duration::from_secs(5)).unwrap());
        let (r, t) = serve(&l, c, Duration::from_millis(800)).unwrap();
        (r, t, h.join().unwrap())
    }

    #[test]
    fn wire_matches_in_process_and_reports_failures() {
        let mut c = cfg("[protocol]\nname = \"ms\"\n");
        c.protocol.mode = RunMode::Mc;
        c.protocol.trials = 40;
        let (local, lt) = run_with_transcript(&c).unwrap();
        let (wire, wt, ps) = serve_with(&c, &c, Behavior::Honest, WIRE_VERSION);
        assert_eq!(lt.to_ndjson(), wt.to_ndjson());
        assert_eq!(local, wire);
        assert_eq!(ps, ProverSummary { rounds: 40, error: None });

        let (g, _, _) = serve_with(&c, &c, Behavior::Garbage, WIRE_VERSION);
        assert!(g.error.is_none() && g.value == 0.0);

        let (d, _, _) = serve_with(&c, &c, Behavior::Drop, WIRE_VERSION);
        assert_eq!(d.error.unwrap().kind, WireErrorKind::Timeout);

        let (s, _, _) = serve_with(&c, &c, Behavior::Silent, WIRE_VERSION);
        assert_eq!(s.error.unwrap().kind, WireErrorKind::Timeout);

        let (v, _, p) = serve_with(&c, &c, Behavior::Honest, WIRE_VERSION + 1);
        assert_eq!(v.error.unwrap().kind, WireErrorKind::VersionMismatch);
        assert_eq!(p.error.unwrap().kind, WireErrorKind::VersionMismatch);

        let other = c.with_param("p", "2").unwrap();
        let (m, _, _) = serve_with(&c, &other, Behavior::Honest, WIRE_VERSION);
        assert_eq!(m.error.unwrap().kind, WireErrorKind::ConfigMismatch);
    }

    #[test]
    fn malformed_line_is_reported() {
        let mut c = cfg("[protocol]\nname = \"ms\"\n");
        c.protocol.mode = RunMode::Mc;
        c.protocol.trials = 5;
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut s = TcpStream::connect(addr).unwrap();
            s.write_all(b"this is not json\n").unwrap();
            let mut buf = String::new();
            let _ = BufReader::new(s).read_line(&mut buf);
        });
        let (r, _) = serve(&l, &c, Duration::from_secs(2)).unwrap();
        h.join().unwrap();
        assert_eq!(r.error.unwrap().kind, WireErrorKind::Malformed);
    }
}
