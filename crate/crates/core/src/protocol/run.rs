use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::{Budget, RunConfig, StrategyKind};
use super::stream::{Task, TaskStream};
use crate::classifier::{Classifier, VersionPolicy};
use crate::codec::{Compressor, NeuralCode, Retention, SnapshotHistory, VideoClip};
use crate::error::{CramError, Result};
use crate::membuf::{RehearsalBuffer, Setting, StoredClip};
use crate::metrics::{Event, MemoryReport, RunLedger};
use crate::rng::{self, Rng};
use crate::tensorcore::Optimizer;

/// Generate the configured stream and run the configured strategy on it.
pub fn run(config: &RunConfig) -> Result<RunLedger> {
    config.validate()?;
    let stream = crate::datagen::generate(&config.stream_spec())?;
    match (config.strategy, config.setting) {
        (StrategyKind::Iid, _) => run_iid(&stream, config),
        (StrategyKind::RgbBuffer, _) => run_rgb_buffer(&stream, config.budget(), config),
        (kind, Setting::Incremental) => run_incremental(&stream, kind, config.budget(), config),
        (kind, Setting::Pretraining) => run_pretraining(&stream, kind, config.budget(), config),
    }
}

/// Where replayed samples live.
enum Store {
    Nothing,
    Codes(RehearsalBuffer<NeuralCode>),
    Raw(RehearsalBuffer<StoredClip>),
}

impl Store {
    fn bytes(&self) -> u64 {
        match self {
            Store::Nothing => 0,
            Store::Codes(b) => b.bytes(),
            Store::Raw(b) => b.bytes(),
        }
    }
}

/// Mutable state shared by every strategy loop.
struct Learner<'a> {
    config: &'a RunConfig,
    kind: StrategyKind,
    compressor: Compressor,
    compressor_opt: Optimizer,
    classifier: Option<Classifier>,
    classifier_opt: Optimizer,
    history: SnapshotHistory,
    store: Store,
    ledger: RunLedger,
}

impl<'a> Learner<'a> {
    fn new(config: &'a RunConfig, kind: StrategyKind, budget: Budget) -> Result<Self> {
        let codec = config.codec();
        let retention = match kind {
            StrategyKind::Cram => Retention::PreviousOnly,
            StrategyKind::DriftFree => Retention::All,
            _ => Retention::LatestOnly,
        };
        let memory = budget.memory(config.setting);
        let store = match kind {
            StrategyKind::Cram | StrategyKind::DriftFree | StrategyKind::StaleCv => {
                Store::Codes(RehearsalBuffer::new(memory, codec.code_bytes())?)
            }
            StrategyKind::RgbBuffer => Store::Raw(RehearsalBuffer::new(
                memory,
                codec.raw_clip_bytes() + crate::codec::CODE_METADATA_BYTES,
            )?),
            StrategyKind::NaiveSgd | StrategyKind::Iid => Store::Nothing,
        };
        let opt = |lr| Optimizer::adam(lr, config.optimizer.weight_decay).map(|o| o.with_warmup(config.optimizer.warmup_steps));
        Ok(Learner {
            config,
            kind,
            compressor: Compressor::new(codec, config.seed)?,
            compressor_opt: opt(config.optimizer.lr)?,
            classifier: None,
            classifier_opt: opt(config.optimizer.lr)?,
            history: SnapshotHistory::new(retention),
            store,
            ledger: RunLedger::default(),
        })
    }

    fn rng(&self, name: &str, task: usize) -> Rng {
        rng::stream(self.config.seed, &format!("protocol/{name}/{task}"))
    }

    fn latest(&self) -> Arc<Compressor> {
        Arc::clone(self.history.latest().expect("a snapshot exists after the first freeze"))
    }

    /// Pixels the compressor rehearses on while learning task `t`.
    fn replay_pixels(&self) -> Result<Vec<VideoClip>> {
        match &self.store {
            Store::Nothing => Ok(Vec::new()),
            Store::Raw(buf) => buf.entries().map(StoredClip::to_clip).collect(),
            Store::Codes(buf) if buf.is_empty() => Ok(Vec::new()),
            Store::Codes(buf) => {
                let codes: Vec<NeuralCode> = buf.entries().cloned().collect();
                match self.kind {
                    // Every code is in the latest code space already.
                    StrategyKind::Cram => self.latest().decode_batch(&codes),
                    StrategyKind::DriftFree => self.decode_own_versions(&codes),
                    // The latest decoder reads everything, whichever encoder wrote it.
                    _ => self.latest().decode_batch_ignoring_version(&codes),
                }
            }
        }
    }

    fn decode_own_versions(&self, codes: &[NeuralCode]) -> Result<Vec<VideoClip>> {
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunk_by(|a, b| a.version == b.version) {
            let snap = self.history.get(chunk[0].version).ok_or(CramError::StaleCode {
                code_version: chunk[0].version,
                compressor_version: self.latest().version(),
            })?;
            out.extend(snap.decode_batch(chunk)?);
        }
        Ok(out)
    }

    fn train_compressor(&mut self, new: &[VideoClip], replay: &[VideoClip], epochs: usize, t: usize) -> Result<()> {
        let b = self.config.batch_size;
        let mut rng = self.rng("compressor", t);
        let mut order: Vec<usize> = (0..new.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(b) {
                let batch: Vec<VideoClip> = idx.iter().map(|&i| new[i].clone()).collect();
                let rehearse = draw(replay, batch.len(), &mut rng);
                self.compressor.train_step(&mut self.compressor_opt, &batch, &rehearse)?;
            }
        }
        Ok(())
    }

    fn freeze(&mut self, t: usize) {
        let snap = self.compressor.freeze();
        let (version, bytes) = (snap.version(), snap.snapshot_bytes());
        self.history.push(snap);
        self.ledger.events.push(Event::Freeze {
            task: t as u32,
            version,
            snapshot_bytes: bytes,
            resident_versions: self.history.versions(),
            buffer_bytes: self.store.bytes(),
        });
    }

    fn refresh(&mut self, t: usize) -> Result<()> {
        let (Some(prev), Some(curr)) = (self.history.previous().cloned(), self.history.latest().cloned()) else {
            return Ok(());
        };
        if let Store::Codes(buf) = &mut self.store {
            let count = buf.refresh(&prev, &curr)?;
            self.ledger.events.push(Event::Refresh {
                task: t as u32,
                from_version: prev.version(),
                to_version: curr.version(),
                count,
                buffer_bytes: buf.bytes(),
            });
        }
        Ok(())
    }

    /// Buffer contents as codes the latest classifier input space understands.
    fn rehearsal_codes(&self) -> Result<(Vec<NeuralCode>, VersionPolicy)> {
        let latest = self.latest();
        let exact = VersionPolicy::Exactly(latest.version());
        Ok(match &self.store {
            Store::Nothing => (Vec::new(), exact),
            Store::Codes(buf) => {
                let codes: Vec<NeuralCode> = buf.entries().cloned().collect();
                match self.kind {
                    StrategyKind::DriftFree => (latest.encode_batch(&self.decode_own_versions(&codes)?)?, exact),
                    StrategyKind::StaleCv => (codes, VersionPolicy::Any),
                    _ => (codes, exact),
                }
            }
            Store::Raw(buf) => {
                let clips = buf.entries().map(StoredClip::to_clip).collect::<Result<Vec<_>>>()?;
                (latest.encode_batch(&clips)?, exact)
            }
        })
    }

    fn train_classifier(
        &mut self,
        new: &[NeuralCode],
        rehearse: &[NeuralCode],
        policy: VersionPolicy,
        n_classes: usize,
        epochs: usize,
        t: usize,
    ) -> Result<()> {
        let cfg = self.config;
        let classifier = match self.classifier.take() {
            None => Classifier::with_capacity(
                cfg.classifier.clone(),
                cfg.codebook_size,
                cfg.clip_geometry.grid,
                n_classes,
                cfg.stream_spec().n_classes().max(n_classes),
                cfg.seed,
            )?,
            Some(mut c) => {
                if n_classes > c.n_classes() {
                    c.grow_head(n_classes)?;
                }
                c
            }
        };
        let classifier = self.classifier.insert(classifier);
        let mut rng = rng::stream(cfg.seed, &format!("protocol/classifier/{t}"));
        let mut order: Vec<usize> = (0..new.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<NeuralCode> = idx.iter().map(|&i| new[i].clone()).collect();
                let replay = draw(rehearse, batch.len(), &mut rng);
                classifier.train_step(&mut self.classifier_opt, &batch, &replay, policy)?;
            }
        }
        Ok(())
    }

    /// Per-task train and eval accuracy over `seen`, encoded by the latest snapshot.
    fn evaluate(&self, seen: &[Task]) -> Result<(Vec<f64>, Vec<f64>)> {
        let latest = self.latest();
        let classifier = self.classifier.as_ref().expect("classifier trained before evaluation");
        let mut train = Vec::with_capacity(seen.len());
        let mut eval = Vec::with_capacity(seen.len());
        for task in seen {
            train.push(classifier.accuracy(&latest.encode_batch(&task.train)?)?);
            eval.push(classifier.accuracy(&latest.encode_batch(&task.eval)?)?);
        }
        Ok((train, eval))
    }

    /// Store task `t`'s samples, sized for the task that follows it. Task
    /// `t` is 0-based; the quota index is 1-based and, with a pretraining
    /// phase, that phase is task 0 and counts as a stored task.
    fn admit(&mut self, task: &Task, codes: Vec<NeuralCode>, t: usize) -> Result<()> {
        let next = match self.config.setting {
            Setting::Incremental => t + 2,
            Setting::Pretraining => t + 1,
        };
        let mut rng = self.rng("admit", t);
        let (evicted, evicted_bytes, count, quota, per_task, bytes) = match &mut self.store {
            Store::Nothing => return Ok(()),
            Store::Codes(buf) => {
                let count = codes.len();
                let quota = buf.budget().quota(buf.entry_bytes(), next)?;
                let ev = buf.admit(codes, next, &mut rng)?;
                (ev.len(), ev.len() as u64 * buf.entry_bytes(), count, quota, buf.per_task_counts(), buf.bytes())
            }
            Store::Raw(buf) => {
                let clips: Vec<StoredClip> = task.train.iter().map(StoredClip::new).collect();
                let count = clips.len();
                let quota = buf.budget().quota(buf.entry_bytes(), next)?;
                let ev = buf.admit(clips, next, &mut rng)?;
                (ev.len(), ev.len() as u64 * buf.entry_bytes(), count, quota, buf.per_task_counts(), buf.bytes())
            }
        };
        self.ledger.events.push(Event::Admit {
            task: t as u32,
            count,
            quota,
            per_task,
            buffer_bytes: bytes,
        });
        if evicted > 0 {
            self.ledger.events.push(Event::Evict {
                task: t as u32,
                count: evicted,
                bytes: evicted_bytes,
                buffer_bytes: bytes,
            });
        }
        Ok(())
    }

    fn memory(&self) -> MemoryReport {
        let classifier = self.classifier.as_ref().map_or(0, Classifier::snapshot_bytes);
        MemoryReport::new(self.store.bytes(), [self.history.bytes()], classifier)
    }

    fn record(&mut self, seen: &[Task]) -> Result<()> {
        let (train, eval) = self.evaluate(seen)?;
        let memory = self.memory();
        self.ledger.push_row(train, eval, memory);
        Ok(())
    }

    fn finish(self) -> Result<RunLedger> {
        self.ledger.validate()?;
        Ok(self.ledger)
    }
}

/// `k` items drawn uniformly with replacement; nothing when `pool` is empty.
fn draw<T: Clone>(pool: &[T], k: usize, rng: &mut Rng) -> Vec<T> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..k).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

fn classes_through(stream: &TaskStream, t: usize) -> usize {
    stream.tasks[..=t]
        .iter()
        .flat_map(|task| task.classes.iter())
        .max()
        .map_or(0, |&c| c as usize + 1)
}

/// The per-task loop shared by the compressed, raw and buffer-free strategies.
fn incremental_loop(stream: &TaskStream, kind: StrategyKind, budget: Budget, config: &RunConfig) -> Result<RunLedger> {
    stream.validate()?;
    let mut learner = Learner::new(config, kind, budget)?;
    for (t, task) in stream.tasks.iter().enumerate() {
        let phase = |p| move |e: CramError| e.in_phase(t + 1, p);
        let replay = if t == 0 { Vec::new() } else { learner.replay_pixels().map_err(phase("replay"))? };
        learner
            .train_compressor(&task.train, &replay, config.epochs.compressor, t)
            .map_err(phase("compressor"))?;
        learner.freeze(t);
        if kind == StrategyKind::Cram {
            learner.refresh(t).map_err(phase("refresh"))?;
        }
        let new_codes = learner.latest().encode_batch(&task.train).map_err(phase("encode"))?;
        let (rehearse, policy) = learner.rehearsal_codes().map_err(phase("rehearsal"))?;
        learner
            .train_classifier(&new_codes, &rehearse, policy, classes_through(stream, t), config.epochs.classifier, t)
            .map_err(phase("classifier"))?;
        learner.admit(task, new_codes, t).map_err(phase("admit"))?;
        learner.record(&stream.tasks[..=t]).map_err(phase("evaluate"))?;
    }
    learner.finish()
}

/// Compressor and classifier learn the tasks in sequence; past tasks are
/// rehearsed from a compressed buffer according to `kind`.
pub fn run_incremental(stream: &TaskStream, kind: StrategyKind, budget: Budget, config: &RunConfig) -> Result<RunLedger> {
    if matches!(kind, StrategyKind::Iid | StrategyKind::RgbBuffer) {
        return Err(CramError::InvalidArgument(format!("{kind} has its own runner")));
    }
    incremental_loop(stream, kind, budget, config)
}

/// Same loop with raw clips in the buffer, re-encoded for the classifier each task.
pub fn run_rgb_buffer(stream: &TaskStream, budget: Budget, config: &RunConfig) -> Result<RunLedger> {
    incremental_loop(stream, StrategyKind::RgbBuffer, budget, config)
}

/// Task 0 trains compressor and classifier jointly, then the compressor is
/// frozen for good; later tasks train only the classifier, rehearsing
/// codes that never need refreshing.
pub fn run_pretraining(stream: &TaskStream, kind: StrategyKind, budget: Budget, config: &RunConfig) -> Result<RunLedger> {
    stream.validate()?;
    if !(kind.stores_codes() || kind == StrategyKind::NaiveSgd) {
        return Err(CramError::InvalidArgument(format!("{kind} has no pretraining variant")));
    }
    if stream.len() < 2 {
        return Err(CramError::InvalidArgument("pretraining needs a first phase and at least one task".into()));
    }
    let pretraining = RunConfig {
        setting: Setting::Pretraining,
        ..config.clone()
    };
    let mut learner = Learner::new(&pretraining, kind, budget)?;
    let first = &stream.tasks[0];
    let phase = |t: usize, p| move |e: CramError| e.in_phase(t + 1, p);
    learner
        .train_compressor(&first.train, &[], config.epochs.pretrain.compressor, 0)
        .map_err(phase(0, "compressor"))?;
    learner.freeze(0);
    let frozen = learner.latest();
    for (t, task) in stream.tasks.iter().enumerate() {
        let epochs = if t == 0 {
            config.epochs.pretrain.classifier
        } else {
            config.epochs.phase2_classifier
        };
        let new_codes = frozen.encode_batch(&task.train).map_err(phase(t, "encode"))?;
        let (rehearse, policy) = learner.rehearsal_codes().map_err(phase(t, "rehearsal"))?;
        learner
            .train_classifier(&new_codes, &rehearse, policy, classes_through(stream, t), epochs, t)
            .map_err(phase(t, "classifier"))?;
        learner.admit(task, new_codes, t).map_err(phase(t, "admit"))?;
        learner.record(&stream.tasks[..=t]).map_err(phase(t, "evaluate"))?;
    }
    learner.finish()
}

/// Compressor then classifier on the whole stream at once, globally shuffled.
pub fn run_iid(stream: &TaskStream, config: &RunConfig) -> Result<RunLedger> {
    stream.validate()?;
    let mut learner = Learner::new(config, StrategyKind::Iid, Budget::Unbounded)?;
    let all: Vec<VideoClip> = stream.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let phase = |p| move |e: CramError| e.in_phase(1, p);
    learner
        .train_compressor(&all, &[], config.epochs.compressor, 0)
        .map_err(phase("compressor"))?;
    learner.freeze(0);
    let codes = learner.latest().encode_batch(&all).map_err(phase("encode"))?;
    let n_classes = classes_through(stream, stream.len() - 1);
    let exact = VersionPolicy::Exactly(learner.latest().version());
    learner
        .train_classifier(&codes, &[], exact, n_classes, config.epochs.classifier, 0)
        .map_err(phase("classifier"))?;
    learner.ledger.joint = true;
    learner.record(&stream.tasks).map_err(phase("evaluate"))?;
    learner.finish()
}
