//! Cross product of seeds and strategies, summarized per strategy.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cram_core::metrics::RunMetrics;
use cram_core::protocol::{RunConfig, StrategyKind};
use rayon::prelude::*;

use crate::{execute, CliError, CliResult, EXIT_FAILURE};

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub eval_mean: f64,
    /// Sample standard deviation; `None` for a single run.
    pub eval_std: Option<f64>,
    pub train_mean: f64,
    pub train_std: Option<f64>,
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

pub fn run_dir(root: &Path, strategy: StrategyKind, seed: u64) -> PathBuf {
    root.join(strategy.name()).join(format!("seed-{seed}"))
}

/// Run every (strategy, seed) pair under `root`, at most `jobs` at a time.
pub fn sweep(
    base: &RunConfig,
    seeds: &[u64],
    strategies: &[StrategyKind],
    jobs: usize,
    root: &Path,
) -> CliResult<(Vec<Summary>, Vec<(PathBuf, RunMetrics)>)> {
    let jobs_list: Vec<(StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    let results: Vec<(PathBuf, RunMetrics)> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(strategy, seed)| {
                let dir = run_dir(root, strategy, seed);
                let config = RunConfig {
                    strategy,
                    seed,
                    output_dir: dir.clone(),
                    ..base.clone()
                };
                config.validate()?;
                let metrics = execute(&config, &dir).map_err(|e| {
                    CliError::new(e.code, format!("{strategy} seed {seed}: {}", e.message))
                })?;
                Ok((dir, metrics))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let summaries = strategies
        .iter()
        .map(|&strategy| {
            let pick = |f: fn(&RunMetrics) -> f64| -> Vec<f64> {
                results
                    .iter()
                    .filter(|(_, m)| m.strategy == strategy.name())
                    .map(|(_, m)| f(m))
                    .collect()
            };
            let eval = pick(|m| m.final_avg_eval_acc);
            let (eval_mean, eval_std) = mean_std(&eval);
            let (train_mean, train_std) = mean_std(&pick(|m| m.final_avg_train_acc));
            Summary {
                strategy,
                runs: eval.len(),
                eval_mean,
                eval_std,
                train_mean,
                train_std,
            }
        })
        .collect();
    Ok((summaries, results))
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
    let mut out = String::from("strategy,runs,eval_mean,eval_std,train_mean,train_std\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.2},{},{:.2},{}",
            r.strategy,
            r.runs,
            r.eval_mean,
            opt(r.eval_std),
            r.train_mean,
            opt(r.train_std)
        )
        .unwrap();
    }
    out
}

pub fn summary_text(rows: &[Summary]) -> String {
    let mut out = format!("{:<12} {:>4} {:>16} {:>16}\n", "strategy", "runs", "eval", "train");
    let pm = |m: f64, s: Option<f64>| match s {
        Some(s) => format!("{m:.2} ± {s:.2}"),
        None => format!("{m:.2}"),
    };
    for r in rows {
        writeln!(
            out,
            "{:<12} {:>4} {:>16} {:>16}",
            r.strategy.name(),
            r.runs,
            pm(r.eval_mean, r.eval_std),
            pm(r.train_mean, r.train_std)
        )
        .unwrap();
    }
    out
}
