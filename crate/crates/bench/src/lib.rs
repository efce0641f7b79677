use std::path::PathBuf;

use qldt::harness::ExperimentConfig;

/// Loads a shipped config from the workspace `configs/` directory.
pub fn config(name: &str) -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"))
}
