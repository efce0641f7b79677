use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qldt::css::{catalog, css_from_code, logical_ops, parse_code};
use qldt::harness::{
    replay, report_csv, run, run_prover, run_with_transcript, serve, show_elem, sweep, sweep_csv, to_json, Behavior,
    ExperimentConfig, RunMode, RunReport, Transcript, WIRE_VERSION,
};
use qldt::Field;

#[derive(Parser)]
#[command(name = "qldt", version, about = "Entangled low-degree test simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampled run with this many trials.
    #[arg(long, conflicts_with = "exact")]
    trials: Option<u64>,
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.protocol.seed = s;
        }
        if let Some(t) = self.trials {
            c.protocol.trials = t;
            c.protocol.mode = RunMode::Mc;
        }
        if self.exact {
            c.protocol.mode = RunMode::Exact;
        }
        c.validate()?;
        Ok(c)
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn emit_report(&self, r: &RunReport) -> Result<()> {
        self.emit(&match self.format {
            Format::Json => to_json(r) + "\n",
            Format::Csv => report_csv(r),
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate one configured experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the NDJSON transcript (sampled runs only).
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run the template once per value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        #[arg(long, num_args = 0.., allow_negative_numbers = true)]
        values: Vec<String>,
    },
    /// Verifier: wait for one prover connection and run the sampled game over it.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Prover: connect to a verifier and answer for every player.
    Prover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long, default_value = "honest")]
        behavior: String,
        #[arg(long, default_value_t = WIRE_VERSION)]
        wire_version: u32,
        #[arg(long, default_value_t = 30000)]
        timeout_ms: u64,
    },
    /// Check a code (catalog name or file) and print its logical operators.
    ValidateCode {
        #[arg(long)]
        code: String,
        #[arg(long, default_value_t = 2)]
        p: u32,
        #[arg(long, default_value_t = 1)]
        t: u32,
    },
    /// Replay a transcript against its config and report any divergence.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
    },
}

fn write_transcript(path: &Path, t: &Transcript) -> Result<()> {
    std::fs::write(path, t.to_ndjson()).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { common, transcript } => {
            let c = common.load()?;
            let r = match &transcript {
                Some(p) => {
                    if c.protocol.mode != RunMode::Mc {
                        bail!("--transcript needs a sampled run (mode = \"mc\" or --trials)");
                    }
                    let (r, t) = run_with_transcript(&c)?;
                    write_transcript(p, &t)?;
                    r
                }
                None => run(&c)?,
            };
            common.emit_report(&r)
        }
        Cmd::Sweep { common, axis, values } => {
            let rows = sweep(&common.load()?, &axis, &values)?;
            common.emit(&match common.format {
                Format::Json => to_json(&rows) + "\n",
                Format::Csv => sweep_csv(&rows),
            })
        }
        Cmd::Serve { common, listen, timeout_ms, transcript } => {
            let mut c = common.load()?;
            c.protocol.mode = RunMode::Mc;
            let l = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("listening on {}", l.local_addr()?);
            let (r, t) = serve(&l, &c, Duration::from_millis(timeout_ms))?;
            if let Some(p) = transcript {
                write_transcript(&p, &t)?;
            }
            common.emit_report(&r)?;
            if let Some(e) = r.error {
                bail!("wire failure: {e}");
            }
            Ok(())
        }
        Cmd::Prover { config, connect, behavior, wire_version, timeout_ms } => {
            let c = ExperimentConfig::load(&config)?;
            let b: Behavior = behavior.parse().map_err(anyhow::Error::msg)?;
            let s = run_prover(connect.as_str(), &c, b, wire_version, Duration::from_millis(timeout_ms))?;
            println!("{}", to_json(&s));
            if let Some(e) = s.error {
                bail!("wire failure: {e}");
            }
            Ok(())
        }
        Cmd::ValidateCode { code, p, t } => {
            let f = Field::canonical(p, t)?;
            let lc = if ["epr", "steane", "rep4"].contains(&code.as_str()) {
                catalog(&code, &f)?
            } else {
                parse_code(&std::fs::read_to_string(&code).with_context(|| format!("reading {code}"))?)?
            };
            let css = css_from_code(&lc)?;
            let logical = match logical_ops(&css) {
                Ok((x, z)) => {
                    let show = |v: &[u32]| v.iter().map(|&a| show_elem(&lc.f, a)).collect::<Vec<_>>();
                    serde_json::json!({ "xbar": show(&x), "zbar": show(&z) })
                }
                Err(e) => serde_json::json!({ "error": e.to_string() }),
            };
            let out = serde_json::json!({
                "field": format!("GF({}^{})", lc.f.p(), lc.f.t()),
                "k": lc.k,
                "k2": lc.k2,
                "self_dual": lc.self_dual,
                "logical_count": lc.logical_count(),
                "logical": logical,
            });
            println!("{out}");
            Ok(())
        }
        Cmd::Report { config, transcript } => {
            let c = ExperimentConfig::load(&config)?;
            let text = std::fs::read_to_string(&transcript).with_context(|| format!("reading {}", transcript.display()))?;
            let r = replay(&c, &Transcript::from_ndjson(&text)?)?;
            println!("{}", to_json(&r));
            if !r.mismatches.is_empty() {
                bail!("{} round(s) diverge from the recorded verdicts", r.mismatches.len());
            }
            Ok(())
        }
    }
}
