//! Accuracy, forgetting, memory and compression figures. Everything here is
//! a pure function of a [`RunLedger`] or a codec configuration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{CramError, Result};

/// Which drop counts as forgetting of task `i` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingVariant {
    /// `max_{q<t} (a[i][q] - a[i][t])`
    Max,
    /// `a[i][i] - a[i][t]`
    LastSelf,
}

/// One logged state change. `buffer_bytes` is the buffer size right after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Freeze {
        task: u32,
        version: u32,
        snapshot_bytes: u64,
        resident_versions: Vec<u32>,
        buffer_bytes: u64,
    },
    Refresh {
        task: u32,
        from_version: u32,
        to_version: u32,
        count: usize,
        buffer_bytes: u64,
    },
    Evict {
        task: u32,
        count: usize,
        bytes: u64,
        buffer_bytes: u64,
    },
    Admit {
        task: u32,
        count: usize,
        /// Per-group quota the buffer was trimmed to.
        quota: usize,
        /// `(task_id, entries)` after admission.
        per_task: Vec<(u32, usize)>,
        buffer_bytes: u64,
    },
}

impl Event {
    pub fn buffer_bytes(&self) -> u64 {
        match self {
            Event::Freeze { buffer_bytes, .. }
            | Event::Refresh { buffer_bytes, .. }
            | Event::Evict { buffer_bytes, .. }
            | Event::Admit { buffer_bytes, .. } => *buffer_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub buffer_bytes: u64,
    pub model_bytes: u64,
    pub total: u64,
}

impl MemoryReport {
    /// `model_bytes` is the sum of every retained snapshot plus the classifier.
    pub fn new(buffer_bytes: u64, snapshot_bytes: impl IntoIterator<Item = u64>, classifier_bytes: u64) -> Self {
        let model_bytes = snapshot_bytes.into_iter().sum::<u64>() + classifier_bytes;
        MemoryReport {
            buffer_bytes,
            model_bytes,
            total: buffer_bytes + model_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub raw_clip_bytes: u64,
    pub code_bytes: u64,
    pub ratio: f64,
}

/// Raw clip bytes versus stored index bytes for one clip.
pub fn compression_report(config: &CodecConfig) -> Result<CompressionReport> {
    config.validate()?;
    let raw = config.raw_clip_bytes();
    let code = config.code_index_bytes();
    Ok(CompressionReport {
        raw_clip_bytes: raw,
        code_bytes: code,
        ratio: raw as f64 / code as f64,
    })
}

/// Accuracy rows, byte accounting and events of one run.
///
/// `eval[t][i]` is the accuracy on task `i` after training through task `t`,
/// so row `t` has `t + 1` entries. A joint (IID) run instead has a single
/// row covering every task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLedger {
    pub train: Vec<Vec<f64>>,
    pub eval: Vec<Vec<f64>>,
    /// Memory after each task.
    pub memory: Vec<MemoryReport>,
    pub events: Vec<Event>,
    pub joint: bool,
}

impl RunLedger {
    pub fn push_row(&mut self, train: Vec<f64>, eval: Vec<f64>, memory: MemoryReport) {
        self.train.push(train);
        self.eval.push(eval);
        self.memory.push(memory);
    }

    pub fn validate(&self) -> Result<()> {
        check_matrix(&self.eval, self.joint)?;
        check_matrix(&self.train, self.joint)?;
        if self.train.len() != self.eval.len() || self.memory.len() != self.eval.len() {
            return Err(CramError::InvalidArgument("ledger rows disagree in length".into()));
        }
        Ok(())
    }

    /// One line per (row, split): `after_task,split,task_1..task_n`, blanks above the diagonal.
    pub fn accuracy_csv(&self) -> String {
        let width = self.eval.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("after_task,split");
        for i in 1..=width {
            write!(out, ",task_{i}").unwrap();
        }
        out.push('\n');
        for (t, (train, eval)) in self.train.iter().zip(&self.eval).enumerate() {
            for (split, row) in [("train", train), ("eval", eval)] {
                write!(out, "{},{split}", t + 1).unwrap();
                for i in 0..width {
                    match row.get(i) {
                        Some(v) => write!(out, ",{v:?}").unwrap(),
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Inverse of [`accuracy_csv`](Self::accuracy_csv); memory and events are not restored.
    pub fn from_accuracy_csv(text: &str, joint: bool) -> Result<Self> {
        let mut ledger = RunLedger {
            joint,
            ..RunLedger::default()
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            let mut fields = line.split(',');
            let _after = fields.next();
            let split = fields.next().unwrap_or_default();
            let row = fields
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CramError::format("accuracy csv", format!("line {}: {e}", n + 1)))?;
            match split {
                "train" => ledger.train.push(row),
                "eval" => ledger.eval.push(row),
                other => return Err(CramError::format("accuracy csv", format!("unknown split {other:?}"))),
            }
        }
        check_matrix(&ledger.eval, joint)?;
        check_matrix(&ledger.train, joint)?;
        Ok(ledger)
    }

    pub fn peak_memory(&self) -> Option<MemoryReport> {
        self.memory.iter().copied().max_by_key(|m| m.total)
    }
}

fn check_matrix(rows: &[Vec<f64>], joint: bool) -> Result<()> {
    if joint && rows.len() > 1 {
        return Err(CramError::InvalidArgument("a joint run has a single accuracy row".into()));
    }
    for (t, row) in rows.iter().enumerate() {
        if !joint && row.len() != t + 1 {
            return Err(CramError::InvalidArgument(format!(
                "accuracy row {} has {} entries",
                t + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CramError::InvalidArgument(format!("accuracy row {} leaves [0, 1]", t + 1)));
        }
    }
    Ok(())
}

/// Mean of the last accuracy row.
pub fn avg_accuracy(rows: &[Vec<f64>]) -> Result<f64> {
    let last = rows
        .last()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| CramError::InvalidArgument("no accuracy rows".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// `F_t = 1/(t-1) * sum_{i<t} f_{i,t}` over a lower-triangular matrix, `t` 1-based.
pub fn avg_forgetting(rows: &[Vec<f64>], t: usize, variant: ForgettingVariant) -> Result<f64> {
    if t < 2 || t > rows.len() {
        return Err(CramError::InvalidArgument(format!(
            "forgetting needs 2 <= t <= {}, got {t}",
            rows.len()
        )));
    }
    check_matrix(&rows[..t], false)?;
    let now = &rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|i| match variant {
            ForgettingVariant::Max => (i..t - 1)
                .map(|q| rows[q][i] - now[i])
                .fold(f64::NEG_INFINITY, f64::max),
            ForgettingVariant::LastSelf => rows[i][i] - now[i],
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Percentage rounded to two decimals.
pub fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Summary written as `metrics.json`; accuracies and forgetting in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: String,
    pub setting: String,
    pub seed: u64,
    pub final_avg_train_acc: f64,
    pub final_avg_eval_acc: f64,
    pub avgf_max: Option<f64>,
    pub avgf_last_self: Option<f64>,
    pub memory: MemorySummary,
    pub compression: CompressionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub buffer_bytes: u64,
    pub model_bytes: u64,
    pub total: u64,
    pub peak_total: u64,
}

impl RunMetrics {
    pub fn from_ledger(
        ledger: &RunLedger,
        strategy: &str,
        setting: &str,
        seed: u64,
        compression: CompressionReport,
    ) -> Result<Self> {
        ledger.validate()?;
        let forgetting = |variant| -> Result<Option<f64>> {
            if ledger.joint || ledger.eval.len() < 2 {
                return Ok(None);
            }
            Ok(Some(percent(avg_forgetting(&ledger.eval, ledger.eval.len(), variant)?)))
        };
        let last = ledger.memory.last().copied().unwrap_or(MemoryReport::new(0, [], 0));
        Ok(RunMetrics {
            strategy: strategy.to_owned(),
            setting: setting.to_owned(),
            seed,
            final_avg_train_acc: percent(avg_accuracy(&ledger.train)?),
            final_avg_eval_acc: percent(avg_accuracy(&ledger.eval)?),
            avgf_max: forgetting(ForgettingVariant::Max)?,
            avgf_last_self: forgetting(ForgettingVariant::LastSelf)?,
            memory: MemorySummary {
                buffer_bytes: last.buffer_bytes,
                model_bytes: last.model_bytes,
                total: last.total,
                peak_total: ledger.peak_memory().map_or(0, |m| m.total),
            },
            compression,
        })
    }
}
