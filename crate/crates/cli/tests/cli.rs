use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qldt"))
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> String {
    root().join("configs").join(name).to_string_lossy().into_owned()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(s: &str) -> Value {
    serde_json::from_str(s.trim()).unwrap()
}

#[test]
fn same_seed_gives_identical_reports() {
    let run = || ok(&bin().args(["run", "--config", &config("wire_codecheck.toml"), "--trials", "120", "--seed", "5"]).output().unwrap());
    let a = run();
    assert_eq!(a, run());
    let r = json(&a);
    assert_eq!(r["mode"], "mc");
    assert_eq!(r["report"]["trials"], 120);
}

#[test]
fn exact_run_and_csv() {
    let out = ok(&bin().args(["run", "--config", &config("c04_magic_square.toml"), "--format", "csv"]).output().unwrap());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let cols: Vec<&str> = lines[0].split(',').collect();
    let vals: Vec<&str> = lines[1].split(',').collect();
    let v = vals[cols.iter().position(|c| *c == "value").unwrap()];
    assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn validation_errors_name_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[protocol]\nname = \"qlowdeg\"\n[params]\nn = 5\nh = 2\nm = 2\n").unwrap();
    let o = bin().args(["run", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("h^m >= n violated"));

    std::fs::write(&bad, "[protocol]\nname = \"ms\"\n[params]\ncolour = 3\n").unwrap();
    let o = bin().args(["run", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn sweep_over_theta_decreases() {
    let out = ok(&bin()
        .args(["sweep", "--config", &config("c11_theta.toml"), "--axis", "theta", "--values", "0", "0.15", "0.3"])
        .output()
        .unwrap());
    let rows = json(&out);
    let vals: Vec<f64> = rows.as_array().unwrap().iter().map(|r| r["report"]["value"].as_f64().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
}

#[test]
fn validate_code_reports_logical_operators() {
    let out = ok(&bin().args(["validate-code", "--code", "steane"]).output().unwrap());
    let v = json(&out);
    assert_eq!(v["k"], 7);
    assert_eq!(v["logical"]["xbar"].as_array().unwrap().len(), 7);
    let file = root().join("fixtures/codes/rep4.code");
    assert_eq!(json(&ok(&bin().args(["validate-code", "--code", file.to_str().unwrap()]).output().unwrap()))["k"], 4);
    let bad = root().join("fixtures/codes/not_self_dual.code");
    let o = bin().args(["validate-code", "--code", bad.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
}

struct Served {
    report: Value,
    transcript: String,
    success: bool,
}

/// Runs `serve` and a `prover` as separate processes.
fn serve_with(prover_args: &[&str], dir: &Path) -> Served {
    let t = dir.join(format!("wire-{}.ndjson", prover_args.join("_")));
    let mut serve = bin()
        .args(["serve", "--config", &config("wire_codecheck.toml"), "--timeout-ms", "1500", "--transcript", t.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(serve.stderr.take().unwrap());
    let mut line = String::new();
    err.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let prover = bin()
        .args(["prover", "--config", &config("wire_codecheck.toml"), "--connect", &addr])
        .args(prover_args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let out = serve.wait_with_output().unwrap();
    prover.wait_with_output().unwrap();
    Served {
        report: json(&String::from_utf8(out.stdout).unwrap()),
        transcript: std::fs::read_to_string(&t).unwrap_or_default(),
        success: out.status.success(),
    }
}

#[test]
fn wire_and_in_process_transcripts_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let local = dir.path().join("local.ndjson");
    let out = ok(&bin().args(["run", "--config", &config("wire_codecheck.toml"), "--transcript", local.to_str().unwrap()]).output().unwrap());
    let wire = serve_with(&[], dir.path());
    assert!(wire.success);
    assert_eq!(std::fs::read_to_string(&local).unwrap(), wire.transcript);
    assert_eq!(json(&out), wire.report);
    assert!((wire.report["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let rep = ok(&bin().args(["report", "--config", &config("wire_codecheck.toml"), "--transcript", local.to_str().unwrap()]).output().unwrap());
    let rep = json(&rep);
    assert_eq!(rep["mismatches"].as_array().unwrap().len(), 0);
    assert_eq!(rep["value"], rep["recorded_value"]);
}

#[test]
fn tampered_transcript_fails_report() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.ndjson");
    ok(&bin().args(["run", "--config", &config("wire_codecheck.toml"), "--trials", "20", "--transcript", t.to_str().unwrap()]).output().unwrap());
    let text = std::fs::read_to_string(&t).unwrap().replacen("\"accept\":true", "\"accept\":false", 1);
    std::fs::write(&t, text).unwrap();
    let o = bin().args(["report", "--config", &config("wire_codecheck.toml"), "--transcript", t.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn garbage_prover_is_rejected_without_crash() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve_with(&["--behavior", "garbage"], dir.path());
    assert!(s.success);
    assert_eq!(s.report["value"].as_f64().unwrap(), 0.0);
    assert!(s.report["error"].is_null());
}

#[test]
fn dropped_connection_is_a_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve_with(&["--behavior", "drop"], dir.path());
    assert!(!s.success);
    assert_eq!(s.report["error"]["kind"], "timeout");
    let s = serve_with(&["--behavior", "silent"], dir.path());
    assert_eq!(s.report["error"]["kind"], "timeout");
}

#[test]
fn version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let s = serve_with(&["--wire-version", "99"], dir.path());
    assert!(!s.success);
    assert_eq!(s.report["error"]["kind"], "version_mismatch");
}
