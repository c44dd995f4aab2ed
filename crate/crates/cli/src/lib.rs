//! Config-driven runner for the `nwave` library.
//!
//! A scenario is validated completely before anything is written, so a
//! configuration error never leaves files behind. Each run produces its
//! artifacts in memory and writes them once at the end.

pub mod config;
pub mod scenario;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ScenarioConfig, ScenarioKind, ValidatedScenario};
pub use scenario::{execute, Artifacts, Check};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(#[from] nwave_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) | RunError::Io(_) => 3,
        }
    }
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub checks: Vec<Check>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<Vec<String>, RunError> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, contents) in &artifacts.files {
        fs::write(dir.join(name), contents)?;
        names.push(name.clone());
    }
    Ok(names)
}

/// Validates, executes and writes the outputs of `config`.
///
/// Returns `Err` only for configuration and I/O failures; numerical failures
/// produce a `report.json` and exit code 3.
pub fn run_scenario(config: &ScenarioConfig, overrides: &Overrides) -> Result<RunSummary, RunError> {
    let validated = config.validate(overrides.seed)?;
    let out_dir = overrides
        .out_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nwave-out"));
    let (artifacts, exit_code) = match execute(&validated) {
        Ok(a) => {
            let code = if a.checks.iter().all(|c| c.pass) { EXIT_PASS } else { EXIT_TOLERANCE };
            (a, code)
        }
        Err(e) => {
            let code = e.exit_code();
            if code == 2 {
                return Err(e);
            }
            (scenario::failure_artifacts(&validated, &e), code)
        }
    };
    let artifacts = artifacts.with_report(&validated, exit_code)?;
    let files = write_artifacts(&out_dir, &artifacts)?;
    Ok(RunSummary {
        exit_code,
        out_dir,
        files,
        checks: artifacts.checks,
    })
}

/// Reads and runs a config file; any error becomes an exit code and a message.
pub fn run_path(path: &Path, overrides: &Overrides) -> (i32, Result<RunSummary, RunError>) {
    let result = fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))
        .and_then(|text| ScenarioConfig::from_json(&text))
        .and_then(|cfg| run_scenario(&cfg, overrides));
    let code = match &result {
        Ok(s) => s.exit_code,
        Err(e) => e.exit_code(),
    };
    (code, result)
}
