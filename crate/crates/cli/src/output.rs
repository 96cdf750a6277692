//! The files a run directory holds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cram_core::metrics::{compression_report, RunLedger, RunMetrics};
use cram_core::protocol::{setting_name, RunConfig};

use crate::{CliError, CliResult, EXIT_CONFIG};

pub const ACCURACY_FILE: &str = "accuracy_matrix.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const MEMORY_FILE: &str = "memory.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config_resolved.toml";

/// `after_task,buffer_bytes,model_bytes,total`
pub fn memory_csv(ledger: &RunLedger) -> String {
    let mut out = String::from("after_task,buffer_bytes,model_bytes,total\n");
    for (t, m) in ledger.memory.iter().enumerate() {
        writeln!(out, "{},{},{},{}", t + 1, m.buffer_bytes, m.model_bytes, m.total).unwrap();
    }
    out
}

pub fn events_jsonl(ledger: &RunLedger) -> String {
    let mut out = String::new();
    for e in &ledger.events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn metrics_for(config: &RunConfig, ledger: &RunLedger) -> CliResult<RunMetrics> {
    Ok(RunMetrics::from_ledger(
        ledger,
        config.strategy.name(),
        setting_name(config.setting),
        config.seed,
        compression_report(&config.codec())?,
    )?)
}

pub fn write_run(dir: &Path, config: &RunConfig, ledger: &RunLedger) -> CliResult<RunMetrics> {
    let metrics = metrics_for(config, ledger)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    for (name, body) in [
        (ACCURACY_FILE, ledger.accuracy_csv()),
        (EVENTS_FILE, events_jsonl(ledger)),
        (MEMORY_FILE, memory_csv(ledger)),
        (CONFIG_FILE, config.to_toml()),
        (METRICS_FILE, json),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(metrics)
}

pub fn read_metrics(dir: &Path) -> CliResult<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: missing or unreadable ({e})", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}
