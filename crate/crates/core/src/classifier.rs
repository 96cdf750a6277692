//! Task model over neural codes: index embedding, a small 3-D conv trunk,
//! global mean pooling and a linear head over the classes seen so far.

use serde::{Deserialize, Serialize};

use crate::codec::NeuralCode;
use crate::error::{CramError, Result};
use crate::tensorcore::{Optimizer, ParamStore, Tape, Tensor, Var};

const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";
/// The head starts at zero, so an all-zero trunk output would get no gradient.
/// A small negative slope keeps the trunk trainable.
const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            embed_dim: 8,
            hidden: 16,
            width: 32,
        }
    }
}

/// Which code versions a training step accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionPolicy {
    /// Every code must come from this compressor version.
    Exactly(u32),
    /// Train on whatever versions the codes carry (the stale-buffer baseline).
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    codebook_size: usize,
    grid: [usize; 3],
    params: ParamStore,
    /// Head rows in use. Rows past this stay zero until their classes arrive.
    n_classes: usize,
}

impl Classifier {
    pub fn new(
        config: ClassifierConfig,
        codebook_size: usize,
        grid: [usize; 3],
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::with_capacity(config, codebook_size, grid, n_classes, n_classes, seed)
    }

    /// A head allocated for `capacity` classes with the first `n_classes`
    /// active, so the serialized size stays fixed as classes arrive.
    pub fn with_capacity(
        config: ClassifierConfig,
        codebook_size: usize,
        grid: [usize; 3],
        n_classes: usize,
        capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 || capacity < n_classes {
            return Err(CramError::InvalidArgument(format!(
                "classifier needs 1 <= classes <= capacity, got {n_classes} of {capacity}"
            )));
        }
        let (e, hid, width) = (config.embed_dim, config.hidden, config.width);
        let mut p = ParamStore::new();
        p.add_kaiming(seed, "embedding", &[codebook_size, e])?;
        p.add_kaiming(seed, "trunk.conv1.weight", &[hid, e, 3, 3, 3])?;
        p.add_zeros("trunk.conv1.bias", &[hid])?;
        p.add_kaiming(seed, "trunk.conv2.weight", &[width, hid, 3, 3, 3])?;
        p.add_zeros("trunk.conv2.bias", &[width])?;
        p.add_zeros(HEAD_W, &[capacity, width])?;
        p.add_zeros(HEAD_B, &[capacity])?;
        Ok(Classifier {
            config,
            codebook_size,
            grid,
            params: p,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn capacity(&self) -> usize {
        self.params.by_name(HEAD_B).expect("head registered").tensor.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn snapshot_bytes(&self) -> u64 {
        self.params.serialized_len()
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        self.params.bind(tape, self.params.index_of(name).expect("registered in new()"))
    }

    fn check_code(&self, code: &NeuralCode) -> Result<()> {
        if code.grid != self.grid {
            return Err(CramError::ShapeMismatch {
                op: "classify",
                left: self.grid.to_vec(),
                right: code.grid.to_vec(),
            });
        }
        if let Some(&bad) = code.indices.iter().find(|&&i| usize::from(i) >= self.codebook_size) {
            return Err(CramError::InvalidArgument(format!(
                "code index {bad} >= codebook size {}",
                self.codebook_size
            )));
        }
        Ok(())
    }

    /// Logits `[N, n_classes]`.
    fn forward(&self, tape: &mut Tape, codes: &[&NeuralCode]) -> Result<Var> {
        for c in codes {
            self.check_code(c)?;
        }
        let [s, h, w] = self.grid;
        let e = self.config.embed_dim;
        let n = codes.len();
        let indices: Vec<usize> = codes
            .iter()
            .flat_map(|c| c.indices.iter().map(|&i| usize::from(i)))
            .collect();
        let table = self.bind(tape, "embedding");
        let rows = tape.gather_rows(table, &indices)?;
        let x = tape.reshape(rows, &[n, s, h, w, e])?;
        let x = tape.permute(x, &[0, 4, 1, 2, 3])?;
        let w1 = self.bind(tape, "trunk.conv1.weight");
        let b1 = self.bind(tape, "trunk.conv1.bias");
        let x = tape.conv3d(x, w1, [1, 2, 2], [1, 1, 1])?;
        let x = tape.bias_add(x, b1, 1)?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE);
        let w2 = self.bind(tape, "trunk.conv2.weight");
        let b2 = self.bind(tape, "trunk.conv2.bias");
        let x = tape.conv3d(x, w2, [2, 2, 2], [1, 1, 1])?;
        let x = tape.bias_add(x, b2, 1)?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE);
        let shape = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[n, shape[1], shape[2] * shape[3] * shape[4]])?;
        let pooled = tape.mean_last(x)?;
        let mut hw = self.bind(tape, HEAD_W);
        let mut hb = self.bind(tape, HEAD_B);
        let cap = self.capacity();
        if self.n_classes < cap {
            let active: Vec<usize> = (0..self.n_classes).collect();
            hw = tape.gather_rows(hw, &active)?;
            let b = tape.reshape(hb, &[cap, 1])?;
            let b = tape.gather_rows(b, &active)?;
            hb = tape.reshape(b, &[self.n_classes])?;
        }
        let hwt = tape.transpose(hw)?;
        let logits = tape.matmul(pooled, hwt)?;
        tape.bias_add(logits, hb, 1)
    }

    pub fn classify_batch(&self, codes: &[NeuralCode]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(64) {
            let refs: Vec<&NeuralCode> = chunk.iter().collect();
            let mut tape = Tape::new();
            let logits = self.forward(&mut tape, &refs)?;
            out.extend(tape.value(logits).data().chunks(self.n_classes).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn classify(&self, code: &NeuralCode) -> Result<Vec<f64>> {
        Ok(self.classify_batch(std::slice::from_ref(code))?.remove(0))
    }

    /// Argmax class per code (lowest index on ties).
    pub fn predict_batch(&self, codes: &[NeuralCode]) -> Result<Vec<usize>> {
        Ok(self.classify_batch(codes)?.iter().map(|l| argmax(l)).collect())
    }

    /// Fraction of codes predicted correctly; labels the head cannot express count as errors.
    pub fn accuracy(&self, codes: &[NeuralCode]) -> Result<f64> {
        if codes.is_empty() {
            return Err(CramError::InvalidArgument("accuracy over an empty set".into()));
        }
        let preds = self.predict_batch(codes)?;
        let correct = preds
            .iter()
            .zip(codes)
            .filter(|(&p, c)| (c.label as usize) < self.n_classes && p == c.label as usize)
            .count();
        Ok(correct as f64 / codes.len() as f64)
    }

    fn check_versions(codes: &[NeuralCode], policy: VersionPolicy) -> Result<()> {
        if let VersionPolicy::Exactly(v) = policy {
            if let Some(stale) = codes.iter().find(|c| c.version != v) {
                return Err(CramError::StaleCode {
                    code_version: stale.version,
                    compressor_version: v,
                });
            }
        }
        Ok(())
    }

    /// Cross-entropy over `new` plus, when non-empty, cross-entropy over `buffer`.
    pub fn objective(&self, tape: &mut Tape, new: &[NeuralCode], buffer: &[NeuralCode]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for set in [new, buffer] {
            if set.is_empty() {
                continue;
            }
            let labels: Vec<usize> = set.iter().map(|c| c.label as usize).collect();
            let refs: Vec<&NeuralCode> = set.iter().collect();
            let logits = self.forward(tape, &refs)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        total.ok_or_else(|| CramError::InvalidArgument("classifier step with no codes".into()))
    }

    /// Loss value without a parameter update.
    pub fn loss(&self, new: &[NeuralCode], buffer: &[NeuralCode]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.objective(&mut tape, new, buffer)?;
        Ok(tape.value(l).item())
    }

    pub fn train_step(
        &mut self,
        opt: &mut Optimizer,
        new: &[NeuralCode],
        buffer: &[NeuralCode],
        policy: VersionPolicy,
    ) -> Result<f64> {
        Self::check_versions(new, policy)?;
        Self::check_versions(buffer, policy)?;
        let mut tape = Tape::new();
        let loss = self.objective(&mut tape, new, buffer)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CramError::NonFinite("classifier loss".into()));
        }
        let grads = tape.backward(loss)?;
        self.params.absorb(&grads);
        opt.step(&mut self.params)?;
        Ok(value)
    }

    /// Extend the head to `new_class_count` outputs; existing rows are kept
    /// bit-exactly and new rows start at zero. Within the capacity this only
    /// activates rows that were already allocated.
    pub fn grow_head(&mut self, new_class_count: usize) -> Result<()> {
        if new_class_count <= self.n_classes {
            return Err(CramError::InvalidArgument(format!(
                "head can only grow: {} -> {new_class_count}",
                self.n_classes
            )));
        }
        if new_class_count <= self.capacity() {
            self.n_classes = new_class_count;
            return Ok(());
        }
        let width = self.config.width;
        for (name, row) in [(HEAD_W, width), (HEAD_B, 1)] {
            let idx = self.params.index_of(name).expect("head registered");
            let p = self.params.get_mut(idx);
            let mut data = p.tensor.data().to_vec();
            data.resize(new_class_count * row, 0.0);
            let shape = if row == 1 {
                vec![new_class_count]
            } else {
                vec![new_class_count, row]
            };
            p.tensor = Tensor::new(shape, data)?;
            p.grad = None;
        }
        self.n_classes = new_class_count;
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
