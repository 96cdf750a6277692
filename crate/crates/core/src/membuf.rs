//! The byte-bounded rehearsal buffer.
//!
//! Entries are grouped by task. Whenever a task's samples are admitted the
//! budget is re-split equally over the past tasks (`K / (n - 1)` entries each
//! in the incremental setting, `K / n` when a pretraining phase counts as an
//! extra task), trimming each group by seeded uniform subsampling.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Compressor, NeuralCode, VideoClip};
use crate::error::{CramError, Result};
use crate::rng::Rng;
use crate::tensorcore::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Incremental,
    Pretraining,
}

/// Total byte cap shared by every stored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBudget {
    pub budget_bytes: u64,
    pub setting: Setting,
}

impl MemoryBudget {
    /// `K`: whole entries of `entry_bytes` that fit.
    pub fn capacity(&self, entry_bytes: u64) -> Result<u64> {
        if entry_bytes == 0 || self.budget_bytes < entry_bytes {
            return Err(CramError::config(
                "budget_bytes",
                format!("{} bytes cannot hold one {entry_bytes}-byte entry", self.budget_bytes),
            ));
        }
        Ok(self.budget_bytes / entry_bytes)
    }

    /// Entries allowed per past task while task `n` (1-based) trains.
    pub fn quota(&self, entry_bytes: u64, n: usize) -> Result<usize> {
        quota(self.capacity(entry_bytes)?, self.setting, n)
    }
}

/// `floor(K / (n - 1))` (incremental, `n >= 2`) or `floor(K / n)` (pretraining, `n >= 1`).
pub fn quota(capacity: u64, setting: Setting, n: usize) -> Result<usize> {
    let past = match setting {
        Setting::Incremental if n >= 2 => n - 1,
        Setting::Pretraining if n >= 1 => n,
        _ => {
            return Err(CramError::InvalidArgument(format!(
                "no past tasks at task {n} in the {setting:?} setting"
            )))
        }
    };
    Ok(usize::try_from(capacity / past as u64).unwrap_or(usize::MAX))
}

/// Something a rehearsal buffer can hold.
pub trait BufferEntry: Clone {
    fn task_id(&self) -> u32;
}

impl BufferEntry for NeuralCode {
    fn task_id(&self) -> u32 {
        self.task_id
    }
}

/// A raw clip kept at one byte per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredClip {
    pixels: Vec<u8>,
    template: VideoClip,
}

impl StoredClip {
    pub fn new(clip: &VideoClip) -> Self {
        StoredClip {
            pixels: clip.quantized_u8(),
            template: clip.clone(),
        }
    }

    pub fn to_clip(&self) -> Result<VideoClip> {
        VideoClip::from_u8(&self.template, &self.pixels)
    }

    pub fn clip_id(&self) -> u64 {
        self.template.clip_id
    }
}

impl BufferEntry for StoredClip {
    fn task_id(&self) -> u32 {
        self.template.task_id
    }
}

#[derive(Debug, Clone)]
pub struct RehearsalBuffer<E: BufferEntry = NeuralCode> {
    groups: BTreeMap<u32, Vec<E>>,
    budget: MemoryBudget,
    entry_bytes: u64,
}

impl<E: BufferEntry> RehearsalBuffer<E> {
    pub fn new(budget: MemoryBudget, entry_bytes: u64) -> Result<Self> {
        budget.capacity(entry_bytes)?;
        Ok(RehearsalBuffer {
            groups: BTreeMap::new(),
            budget,
            entry_bytes,
        })
    }

    pub fn budget(&self) -> MemoryBudget {
        self.budget
    }

    pub fn entry_bytes(&self) -> u64 {
        self.entry_bytes
    }

    pub fn capacity(&self) -> u64 {
        self.budget.capacity(self.entry_bytes).expect("checked in new()")
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> u64 {
        self.len() as u64 * self.entry_bytes
    }

    /// `(task_id, entry count)` in task order.
    pub fn per_task_counts(&self) -> Vec<(u32, usize)> {
        self.groups.iter().map(|(&t, g)| (t, g.len())).collect()
    }

    /// All entries, grouped by task in task order.
    pub fn entries(&self) -> impl Iterator<Item = &E> {
        self.groups.values().flatten()
    }

    /// Admit `incoming` so the buffer is ready for task `n` (1-based): every
    /// group, old or new, is trimmed to the task-`n` quota. Returns the
    /// evicted entries.
    pub fn admit(&mut self, incoming: Vec<E>, n: usize, rng: &mut Rng) -> Result<Vec<E>> {
        let q = self.budget.quota(self.entry_bytes, n)?;
        for e in incoming {
            self.groups.entry(e.task_id()).or_default().push(e);
        }
        let max_groups = match self.budget.setting {
            Setting::Incremental => n - 1,
            Setting::Pretraining => n,
        };
        if self.groups.len() > max_groups {
            return Err(CramError::InvalidArgument(format!(
                "{} task groups exceed the {max_groups} past tasks of task {n}",
                self.groups.len()
            )));
        }
        let mut evicted = Vec::new();
        for group in self.groups.values_mut() {
            if group.len() > q {
                let mut keep = index::sample(rng, group.len(), q).into_vec();
                keep.sort_unstable();
                let mut kept = Vec::with_capacity(q);
                let mut next = keep.iter().peekable();
                for (i, e) in group.drain(..).enumerate() {
                    if next.peek() == Some(&&i) {
                        next.next();
                        kept.push(e);
                    } else {
                        evicted.push(e);
                    }
                }
                *group = kept;
            }
        }
        self.groups.retain(|_, g| !g.is_empty());
        debug_assert!(self.bytes() <= self.budget.budget_bytes);
        Ok(evicted)
    }

    /// `batch_size` entries drawn uniformly with replacement; empty when the buffer is.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Vec<E> {
        let all: Vec<&E> = self.entries().collect();
        if all.is_empty() {
            return Vec::new();
        }
        (0..batch_size).map(|_| all[rng.gen_range(0..all.len())].clone()).collect()
    }
}

impl RehearsalBuffer<NeuralCode> {
    /// The single version every entry carries, `None` when empty.
    pub fn version(&self) -> Result<Option<u32>> {
        let mut versions: Vec<u32> = self.entries().map(|c| c.version).collect();
        versions.sort_unstable();
        versions.dedup();
        match versions.len() {
            0 => Ok(None),
            1 => Ok(Some(versions[0])),
            _ => Err(CramError::MixedVersions(versions)),
        }
    }

    /// Re-express every code in `curr`'s code space:
    /// `code <- encode(curr, decode(prev, code))`. Returns the number refreshed.
    pub fn refresh(&mut self, prev: &Compressor, curr: &Compressor) -> Result<usize> {
        let Some(version) = self.version()? else {
            return Ok(0);
        };
        if version != prev.version() {
            return Err(CramError::StaleCode {
                code_version: version,
                compressor_version: prev.version(),
            });
        }
        if curr.version() != prev.version() + 1 {
            return Err(CramError::VersionGap {
                buffer: prev.version(),
                compressor: curr.version(),
            });
        }
        let mut count = 0;
        for group in self.groups.values_mut() {
            let refreshed: Vec<NeuralCode> = group
                .par_chunks(16)
                .map(|chunk| {
                    let clips = prev.decode_batch(chunk)?;
                    curr.encode_batch(&clips)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            count += refreshed.len();
            *group = refreshed;
        }
        Ok(count)
    }

    /// `"CRAMB1"`, budget `u64`, entry count `u64`, then each code in `CRAMC1` form.
    pub fn dump(&self, codebook_size: usize) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(&self.budget.budget_bytes.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for code in self.entries() {
            code.write_to(&mut out, codebook_size);
        }
        out
    }

    pub fn restore(bytes: &[u8], setting: Setting, entry_bytes: u64, codebook_size: usize) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "buffer");
        if r.take(6)? != BUFFER_MAGIC {
            return Err(CramError::format("buffer", "bad magic"));
        }
        let budget = MemoryBudget {
            budget_bytes: r.u64()?,
            setting,
        };
        let count = r.u64()?;
        let mut buf = RehearsalBuffer::new(budget, entry_bytes)?;
        for _ in 0..count {
            let code = NeuralCode::read_from(&mut r, codebook_size)?;
            buf.groups.entry(code.task_id).or_default().push(code);
        }
        if !r.is_empty() {
            return Err(CramError::format("buffer", "trailing bytes"));
        }
        if buf.bytes() > budget.budget_bytes {
            return Err(CramError::format("buffer", "entries exceed the stored budget"));
        }
        Ok(buf)
    }
}

pub const BUFFER_MAGIC: &[u8; 6] = b"CRAMB1";
