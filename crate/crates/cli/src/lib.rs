//! Runs, seed/strategy sweeps and comparisons over run directories.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error (or a run
//! directory without `metrics.json`), 3 invariant breach during a run,
//! 4 a failed `--assert-order`.

use std::fmt;
use std::path::{Path, PathBuf};

use cram_core::metrics::RunMetrics;
use cram_core::protocol::{self, RunConfig};
use cram_core::CramError;

pub mod compare;
pub mod output;
pub mod sweep;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_ORDER: i32 = 4;

/// Relative output directories are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "CRAM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CramError> for CliError {
    fn from(e: CramError) -> Self {
        let code = match e {
            _ if e.is_config() => EXIT_CONFIG,
            CramError::Io { .. } => EXIT_FAILURE,
            _ => EXIT_INVARIANT,
        };
        CliError::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `dir` itself, or `$CRAM_OUTPUT_ROOT/dir` when `dir` is relative and the variable is set.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Load a config file and apply `--set` overrides plus the `--strategy` / `--seed` shorthands.
pub fn load_config(path: &Path, overrides: &[String], strategy: Option<&str>, seed: Option<u64>) -> CliResult<RunConfig> {
    let base = RunConfig::load(path)?;
    let mut all = overrides.to_vec();
    if let Some(s) = strategy {
        all.push(format!("strategy={s}"));
    }
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    Ok(base.with_overrides(&all)?)
}

/// Execute one run and write its ledger and metrics into `dir`.
pub fn execute(config: &RunConfig, dir: &Path) -> CliResult<RunMetrics> {
    let ledger = protocol::run(config)?;
    output::write_run(dir, config, &ledger)
}
