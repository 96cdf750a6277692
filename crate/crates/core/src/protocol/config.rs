use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::codec::CodecConfig;
use crate::datagen::StreamSpec;
use crate::error::{CramError, Result};
use crate::membuf::{MemoryBudget, Setting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Compressed buffer refreshed into the newest code space at every task.
    Cram,
    /// Codes never refreshed; every decoder snapshot is kept to read them.
    DriftFree,
    /// Codes never refreshed and read with the newest decoder.
    StaleCv,
    /// No rehearsal at all.
    NaiveSgd,
    /// Raw clips in the buffer.
    RgbBuffer,
    /// Joint training on the whole stream.
    Iid,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Cram,
        StrategyKind::DriftFree,
        StrategyKind::StaleCv,
        StrategyKind::NaiveSgd,
        StrategyKind::RgbBuffer,
        StrategyKind::Iid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Cram => "cram",
            StrategyKind::DriftFree => "drift_free",
            StrategyKind::StaleCv => "stale_cv",
            StrategyKind::NaiveSgd => "naive_sgd",
            StrategyKind::RgbBuffer => "rgb_buffer",
            StrategyKind::Iid => "iid",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| CramError::config("strategy", format!("unknown strategy {name:?}")))
    }

    /// Whether the strategy stores neural codes (and so can run with a frozen compressor).
    pub fn stores_codes(self) -> bool {
        matches!(self, StrategyKind::Cram | StrategyKind::DriftFree | StrategyKind::StaleCv)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn setting_name(setting: Setting) -> &'static str {
    match setting {
        Setting::Incremental => "incremental",
        Setting::Pretraining => "pretraining",
    }
}

/// A byte cap, or `"unbounded"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub enum Budget {
    Bytes(u64),
    Unbounded,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Bytes(u64),
    Word(String),
}

impl TryFrom<BudgetRepr> for Budget {
    type Error = String;

    fn try_from(r: BudgetRepr) -> std::result::Result<Self, String> {
        match r {
            BudgetRepr::Bytes(b) => Ok(Budget::Bytes(b)),
            BudgetRepr::Word(w) if w == "unbounded" => Ok(Budget::Unbounded),
            BudgetRepr::Word(w) => Err(format!("expected a byte count or \"unbounded\", got {w:?}")),
        }
    }
}

impl From<Budget> for BudgetRepr {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Bytes(n) => BudgetRepr::Bytes(n),
            Budget::Unbounded => BudgetRepr::Word("unbounded".into()),
        }
    }
}

impl Budget {
    pub fn memory(self, setting: Setting) -> MemoryBudget {
        MemoryBudget {
            budget_bytes: match self {
                Budget::Bytes(n) => n,
                Budget::Unbounded => u64::MAX,
            },
            setting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips_per_class_train: usize,
    pub clips_per_class_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            clips_per_class_train: 30,
            clips_per_class_eval: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipGeometry {
    /// `[T, H, W]` of one clip.
    pub clip: [usize; 3],
    /// `[t, h, w]` of its index grid.
    pub grid: [usize; 3],
}

impl Default for ClipGeometry {
    fn default() -> Self {
        let c = CodecConfig::default();
        ClipGeometry {
            clip: c.clip,
            grid: c.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainEpochs {
    pub compressor: usize,
    pub classifier: usize,
}

impl Default for PretrainEpochs {
    fn default() -> Self {
        PretrainEpochs {
            compressor: 20,
            classifier: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Epochs {
    /// Compressor epochs per incremental task.
    pub compressor: usize,
    /// Classifier epochs per incremental task.
    pub classifier: usize,
    /// Joint first phase of the pretraining setting.
    pub pretrain: PretrainEpochs,
    /// Classifier epochs per task after pretraining.
    pub phase2_classifier: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Epochs {
            compressor: 6,
            classifier: 30,
            pretrain: PretrainEpochs::default(),
            phase2_classifier: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Learning rate of both the compressor and the classifier.
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup, in optimizer steps, for both models.
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            weight_decay: 1e-5,
            warmup_steps: 50,
        }
    }
}

/// Everything one run needs. Only `budget_bytes` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    /// Incremental tasks (after the pretraining task, if any).
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_classes_per_task")]
    pub classes_per_task: usize,
    /// Classes of the joint first phase; pretraining setting only.
    #[serde(default)]
    pub pretrain_classes: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub clip_geometry: ClipGeometry,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    pub budget_bytes: Option<Budget>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: Epochs,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_strategy() -> StrategyKind {
    StrategyKind::Cram
}
fn default_setting() -> Setting {
    Setting::Incremental
}
fn default_tasks() -> usize {
    5
}
fn default_classes_per_task() -> usize {
    4
}
fn default_codebook_size() -> usize {
    CodecConfig::default().codebook_size
}
fn default_batch_size() -> usize {
    8
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    /// Parse and validate TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .filter(|_| e.message().contains("field"))
                .unwrap_or("config")
                .to_owned();
            CramError::config(field, e.message().trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CramError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The complete configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_bytes.is_none() {
            return Err(CramError::config("budget_bytes", "missing; give a byte count or \"unbounded\""));
        }
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(CramError::config("tasks", "need at least one task with one class"));
        }
        match self.setting {
            Setting::Pretraining => {
                if self.pretrain_classes == 0 {
                    return Err(CramError::config("pretrain_classes", "the pretraining setting needs a first phase"));
                }
                if !self.strategy.stores_codes() && self.strategy != StrategyKind::NaiveSgd {
                    return Err(CramError::config(
                        "setting",
                        format!("strategy {} has no frozen-compressor variant", self.strategy),
                    ));
                }
            }
            Setting::Incremental if self.pretrain_classes != 0 => {
                return Err(CramError::config("pretrain_classes", "only used by the pretraining setting"));
            }
            Setting::Incremental => {}
        }
        if self.batch_size == 0 {
            return Err(CramError::config("batch_size", "must be positive"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(CramError::config("optimizer.lr", "must be positive and finite"));
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.weight_decay.is_finite()) {
            return Err(CramError::config("optimizer.weight_decay", "must be non-negative and finite"));
        }
        if self.codebook_size < 2 || self.codebook_size > usize::from(u16::MAX) + 1 {
            return Err(CramError::config("codebook_size", "must be in [2, 65536]"));
        }
        self.codec().validate().map_err(|e| CramError::config("clip_geometry", e.to_string()))?;
        self.stream_spec().validate()?;
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            clip: self.clip_geometry.clip,
            grid: self.clip_geometry.grid,
            codebook_size: self.codebook_size,
            ..CodecConfig::default()
        }
    }

    pub fn budget(&self) -> Budget {
        self.budget_bytes.expect("validated config has a budget")
    }

    /// Class layout of the synthetic stream: the pretraining task (if any) first.
    pub fn stream_spec(&self) -> StreamSpec {
        let mut task_classes = Vec::new();
        if self.setting == Setting::Pretraining {
            task_classes.push(self.pretrain_classes);
        }
        task_classes.extend(std::iter::repeat_n(self.classes_per_task, self.tasks));
        StreamSpec {
            task_classes,
            clips_per_class_train: self.data.clips_per_class_train,
            clips_per_class_eval: self.data.clips_per_class_eval,
            clip: self.clip_geometry.clip,
            seed: self.seed,
            ..StreamSpec::default()
        }
    }

    /// Apply `key=value` overrides in order, then validate once. Keys may be
    /// dotted (`epochs.classifier=5`); values are read as TOML, falling back
    /// to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("run config always serializes");
        for assignment in assignments {
            let assignment = assignment.as_ref();
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| CramError::config(assignment, "override must look like key=value"))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields at least one part");
            let mut node = &mut root;
            for part in parents {
                node = node
                    .as_table_mut()
                    .ok_or_else(|| CramError::config(key, "not a table"))?
                    .entry((*part).to_owned())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            node.as_table_mut()
                .ok_or_else(|| CramError::config(key, "not a table"))?
                .insert((*last).to_owned(), value);
        }
        Self::from_toml(&toml::to_string(&root).expect("toml value serializes"))
    }

    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        self.with_overrides(&[assignment])
    }
}
