//! Side-by-side tables of finished runs and the ordering check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cram_core::metrics::RunMetrics;

use crate::output::read_metrics;
use crate::{CliError, CliResult, EXIT_CONFIG, EXIT_ORDER};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

pub fn load_rows(dirs: &[PathBuf]) -> CliResult<Vec<Row>> {
    if dirs.len() < 2 {
        return Err(CliError::new(EXIT_CONFIG, "compare needs at least two run directories"));
    }
    dirs.iter()
        .map(|d| {
            Ok(Row {
                dir: d.clone(),
                metrics: read_metrics(d)?,
            })
        })
        .collect()
}

fn cells(r: &Row) -> [String; 8] {
    let m = &r.metrics;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
    [
        r.dir.display().to_string(),
        m.strategy.clone(),
        m.seed.to_string(),
        format!("{:.2}", m.final_avg_train_acc),
        format!("{:.2}", m.final_avg_eval_acc),
        opt(m.avgf_max),
        opt(m.avgf_last_self),
        m.memory.peak_total.to_string(),
    ]
}

const HEADER: [&str; 8] = ["run", "strategy", "seed", "train_acc", "eval_acc", "avgf_max", "avgf_last_self", "peak_bytes"];

pub fn table_csv(rows: &[Row]) -> String {
    let mut out = HEADER.join(",") + "\n";
    for r in rows {
        out += &(cells(r).join(",") + "\n");
    }
    out
}

pub fn table_text(rows: &[Row]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cols: Vec<&str>| {
        let padded: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    };
    line(&mut out, HEADER.to_vec());
    for r in &body {
        line(&mut out, r.iter().map(String::as_str).collect());
    }
    out
}

/// A chain like `cram>stale_cv>naive_sgd`.
pub fn parse_order(spec: &str) -> CliResult<Vec<String>> {
    let names: Vec<String> = spec.split('>').map(|s| s.trim().to_owned()).collect();
    if names.len() < 2 || names.iter().any(String::is_empty) {
        return Err(CliError::new(EXIT_CONFIG, format!("bad order {spec:?}; expected a>b[>c...]")));
    }
    Ok(names)
}

/// Every adjacent pair `a > b` must hold for the mean final eval accuracy
/// and, for each seed both strategies ran, by at least `margin` points.
pub fn check_order(rows: &[Row], order: &[String], margin: f64) -> CliResult<()> {
    let mut by_strategy: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        by_strategy
            .entry(r.metrics.strategy.as_str())
            .or_default()
            .insert(r.metrics.seed, r.metrics.final_avg_eval_acc);
    }
    let mut failures = Vec::new();
    for pair in order.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (Some(sa), Some(sb)) = (by_strategy.get(a.as_str()), by_strategy.get(b.as_str())) else {
            return Err(CliError::new(EXIT_CONFIG, format!("no runs for {a} or {b}")));
        };
        let mean = |s: &BTreeMap<u64, f64>| s.values().sum::<f64>() / s.len() as f64;
        if mean(sa) <= mean(sb) {
            failures.push(format!("{a} > {b}: mean {:.2} vs {:.2}", mean(sa), mean(sb)));
        }
        for (seed, va) in sa {
            if let Some(vb) = sb.get(seed) {
                if va - vb < margin || va <= vb {
                    failures.push(format!("{a} > {b}: seed {seed} {va:.2} vs {vb:.2} (margin {margin})"));
                }
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_ORDER, format!("order violated:\n  {}", failures.join("\n  "))))
    }
}

pub fn write_csv(path: &Path, rows: &[Row]) -> CliResult<()> {
    std::fs::write(path, table_csv(rows)).map_err(|e| CliError::io(path, e))
}
