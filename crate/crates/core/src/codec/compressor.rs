//! The VQ video autoencoder `(encoder, decoder, codebook)` and its snapshots.

use std::sync::Arc;

use super::clip::{Provenance, VideoClip};
use super::code::NeuralCode;
use super::vq::{nearest_codewords, vq_loss};
use super::CodecConfig;
use crate::error::{CramError, Result};
use crate::tensorcore::{Optimizer, ParamStore, Tape, Tensor, Var};

/// Clips per forward pass during inference.
const INFERENCE_CHUNK: usize = 16;

const CODEBOOK: &str = "codebook";

/// Codebook rows start in `U(-b, b)`; a full Kaiming spread leaves most rows
/// far from the initial latents and only a handful ever get selected.
const CODEBOOK_INIT_BOUND: f64 = 0.25;

/// Versioned compressor. The working copy is trained during a task;
/// [`Compressor::freeze`] hands out an immutable snapshot of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    config: CodecConfig,
    params: ParamStore,
    version: u32,
}

/// Stack clips into a channels-first batch `[N, 3, T, H, W]`.
pub fn clips_to_batch(clips: &[&VideoClip]) -> Result<Tensor> {
    let [t, h, w] = clips[0].geometry();
    let vol = t * h * w;
    let mut data = vec![0.0; clips.len() * 3 * vol];
    for (n, clip) in clips.iter().enumerate() {
        if clip.geometry() != [t, h, w] {
            return Err(CramError::ShapeMismatch {
                op: "clips_to_batch",
                left: vec![t, h, w],
                right: clip.geometry().to_vec(),
            });
        }
        let base = n * 3 * vol;
        for (p, px) in clip.frames.data().chunks(3).enumerate() {
            for c in 0..3 {
                data[base + c * vol + p] = px[c];
            }
        }
    }
    Tensor::new(vec![clips.len(), 3, t, h, w], data)
}

impl Compressor {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (hid, d, ft) = (config.hidden, config.latent_dim, config.temporal_factor());
        let mut p = ParamStore::new();
        p.add_kaiming(seed, "encoder.conv1.weight", &[hid, 3, 1, 4, 4])?;
        p.add_zeros("encoder.conv1.bias", &[hid])?;
        p.add_kaiming(seed, "encoder.conv2.weight", &[hid, hid, ft, 4, 4])?;
        p.add_zeros("encoder.conv2.bias", &[hid])?;
        p.add_kaiming(seed, "encoder.conv3.weight", &[d, hid, 1, 1, 1])?;
        p.add_zeros("encoder.conv3.bias", &[d])?;
        p.add_uniform(seed, CODEBOOK, &[config.codebook_size, d], CODEBOOK_INIT_BOUND)?;
        p.add_kaiming(seed, "decoder.conv1.weight", &[hid, d, 1, 1, 1])?;
        p.add_zeros("decoder.conv1.bias", &[hid])?;
        p.add_kaiming(seed, "decoder.deconv1.weight", &[hid, hid, ft, 4, 4])?;
        p.add_zeros("decoder.deconv1.bias", &[hid])?;
        p.add_kaiming(seed, "decoder.deconv2.weight", &[hid, 3, 1, 4, 4])?;
        p.add_zeros("decoder.deconv2.bias", &[3])?;
        Ok(Compressor {
            config,
            params: p,
            version: 1,
        })
    }

    /// Rebuild from a weight snapshot.
    pub fn from_params(config: CodecConfig, params: ParamStore, version: u32) -> Result<Self> {
        let reference = Compressor::new(config.clone(), 0)?;
        for expected in reference.params.iter() {
            match params.by_name(&expected.name) {
                Some(p) if p.tensor.shape() == expected.tensor.shape() => {}
                _ => {
                    return Err(CramError::format(
                        "weights",
                        format!("missing or misshapen parameter `{}`", expected.name),
                    ))
                }
            }
        }
        Ok(Compressor { config, params, version })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn codebook(&self) -> &Tensor {
        &self.params.by_name(CODEBOOK).expect("codebook exists").tensor
    }

    pub fn snapshot_bytes(&self) -> u64 {
        self.params.serialized_len()
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Var {
        let idx = self.params.index_of(name).expect("parameter registered in new()");
        self.params.bind(tape, idx)
    }

    /// Encoder output `[N, d, s, h, w]` for input `[N, 3, T, H, W]`.
    fn encoder(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let ft = self.config.temporal_factor();
        let w1 = self.bind(tape, "encoder.conv1.weight");
        let b1 = self.bind(tape, "encoder.conv1.bias");
        let h = tape.conv3d(x, w1, [1, 2, 2], [0, 1, 1])?;
        let h = tape.bias_add(h, b1, 1)?;
        let h = tape.relu(h);
        let w2 = self.bind(tape, "encoder.conv2.weight");
        let b2 = self.bind(tape, "encoder.conv2.bias");
        let h = tape.conv3d(h, w2, [ft, 2, 2], [0, 1, 1])?;
        let h = tape.bias_add(h, b2, 1)?;
        let h = tape.relu(h);
        let w3 = self.bind(tape, "encoder.conv3.weight");
        let b3 = self.bind(tape, "encoder.conv3.bias");
        let z = tape.conv3d(h, w3, [1, 1, 1], [0, 0, 0])?;
        tape.bias_add(z, b3, 1)
    }

    /// Decoder output `[N, 3, T, H, W]` (unclamped) for latents `[N, d, s, h, w]`.
    fn decoder(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let ft = self.config.temporal_factor();
        let w1 = self.bind(tape, "decoder.conv1.weight");
        let b1 = self.bind(tape, "decoder.conv1.bias");
        let h = tape.conv3d(z, w1, [1, 1, 1], [0, 0, 0])?;
        let h = tape.bias_add(h, b1, 1)?;
        let h = tape.relu(h);
        let w2 = self.bind(tape, "decoder.deconv1.weight");
        let b2 = self.bind(tape, "decoder.deconv1.bias");
        let h = tape.conv_transpose3d(h, w2, [ft, 2, 2], [0, 1, 1])?;
        let h = tape.bias_add(h, b2, 1)?;
        let h = tape.relu(h);
        let w3 = self.bind(tape, "decoder.deconv2.weight");
        let b3 = self.bind(tape, "decoder.deconv2.bias");
        let y = tape.conv_transpose3d(h, w3, [1, 2, 2], [0, 1, 1])?;
        tape.bias_add(y, b3, 1)
    }

    /// `[N, d, s, h, w]` -> `[N*s*h*w, d]`
    fn latents_to_rows(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        let zt = tape.permute(z, &[0, 2, 3, 4, 1])?;
        tape.reshape(zt, &[s[0] * s[2] * s[3] * s[4], s[1]])
    }

    /// `[N*s*h*w, d]` -> `[N, d, s, h, w]`
    fn rows_to_latents(&self, tape: &mut Tape, rows: Var, n: usize) -> Result<Var> {
        let [s, h, w] = self.config.grid;
        let d = self.config.latent_dim;
        let r = tape.reshape(rows, &[n, s, h, w, d])?;
        tape.permute(r, &[0, 4, 1, 2, 3])
    }

    fn check_geometry(&self, clip: &VideoClip) -> Result<()> {
        if clip.geometry() != self.config.clip {
            return Err(CramError::ShapeMismatch {
                op: "encode",
                left: self.config.clip.to_vec(),
                right: clip.geometry().to_vec(),
            });
        }
        Ok(())
    }

    /// Nearest-codeword indices for each clip; codes carry this compressor's version.
    pub fn encode_batch(&self, clips: &[VideoClip]) -> Result<Vec<NeuralCode>> {
        let mut out = Vec::with_capacity(clips.len());
        let codebook = self.codebook();
        let d = self.config.latent_dim;
        let per_clip: usize = self.config.grid.iter().product();
        for chunk in clips.chunks(INFERENCE_CHUNK) {
            for c in chunk {
                self.check_geometry(c)?;
            }
            let refs: Vec<&VideoClip> = chunk.iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(clips_to_batch(&refs)?);
            let z = self.encoder(&mut tape, x)?;
            let rows = self.latents_to_rows(&mut tape, z)?;
            let idx = nearest_codewords(tape.value(rows).data(), codebook.data(), d);
            for (clip, grid) in chunk.iter().zip(idx.chunks(per_clip)) {
                out.push(NeuralCode {
                    indices: grid.iter().map(|&i| i as u16).collect(),
                    grid: self.config.grid,
                    version: self.version,
                    label: clip.label,
                    clip_id: clip.clip_id,
                    task_id: clip.task_id,
                });
            }
        }
        Ok(out)
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<NeuralCode> {
        Ok(self.encode_batch(std::slice::from_ref(clip))?.remove(0))
    }

    /// Decode codes produced by this exact compressor version.
    pub fn decode_batch(&self, codes: &[NeuralCode]) -> Result<Vec<VideoClip>> {
        if let Some(stale) = codes.iter().find(|c| c.version != self.version) {
            return Err(CramError::StaleCode {
                code_version: stale.version,
                compressor_version: self.version,
            });
        }
        self.decode_batch_ignoring_version(codes)
    }

    pub fn decode(&self, code: &NeuralCode) -> Result<VideoClip> {
        Ok(self.decode_batch(std::slice::from_ref(code))?.remove(0))
    }

    /// Decode without the version check. Reading codes from an older encoder
    /// this way is the representation-drift failure the stale baseline models.
    pub fn decode_batch_ignoring_version(&self, codes: &[NeuralCode]) -> Result<Vec<VideoClip>> {
        let k = self.config.codebook_size;
        let [t, h, w] = self.config.clip;
        let vol = t * h * w;
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(INFERENCE_CHUNK) {
            let mut indices = Vec::with_capacity(chunk.len() * chunk[0].len());
            for c in chunk {
                if c.grid != self.config.grid {
                    return Err(CramError::ShapeMismatch {
                        op: "decode",
                        left: self.config.grid.to_vec(),
                        right: c.grid.to_vec(),
                    });
                }
                if let Some(&bad) = c.indices.iter().find(|&&i| usize::from(i) >= k) {
                    return Err(CramError::InvalidArgument(format!("code index {bad} >= codebook size {k}")));
                }
                indices.extend(c.indices.iter().map(|&i| usize::from(i)));
            }
            let mut tape = Tape::new();
            let cb = tape.constant(self.codebook().clone());
            let rows = tape.gather_rows(cb, &indices)?;
            let z = self.rows_to_latents(&mut tape, rows, chunk.len())?;
            let y = self.decoder(&mut tape, z)?;
            let data = tape.value(y).data();
            for (n, code) in chunk.iter().enumerate() {
                let base = n * 3 * vol;
                let mut frames = vec![0.0; 3 * vol];
                for p in 0..vol {
                    for c in 0..3 {
                        frames[p * 3 + c] = data[base + c * vol + p].clamp(0.0, 1.0);
                    }
                }
                out.push(VideoClip {
                    frames: Tensor::new(vec![t, h, w, 3], frames)?,
                    label: code.label,
                    clip_id: code.clip_id,
                    task_id: code.task_id,
                    video_id: code.clip_id,
                    provenance: Provenance::Decoded { version: self.version },
                });
            }
        }
        Ok(out)
    }

    /// Reconstruction MSE plus VQ loss for one set of clips.
    fn set_loss(&self, tape: &mut Tape, clips: &[&VideoClip], codebook: Var) -> Result<Var> {
        let x = tape.constant(clips_to_batch(clips)?);
        let z = self.encoder(tape, x)?;
        let rows = self.latents_to_rows(tape, z)?;
        let q = vq_loss(tape, rows, codebook, self.config.beta)?;
        let zq = self.rows_to_latents(tape, q.quantized, clips.len())?;
        let recon = self.decoder(tape, zq)?;
        let rec_loss = tape.mse(recon, x)?;
        tape.add(rec_loss, q.loss)
    }

    /// Record the training objective on `tape`: the new-clip term plus, when
    /// `replay` is non-empty, the same term over replayed reconstructions.
    pub fn objective(&self, tape: &mut Tape, new: &[VideoClip], replay: &[VideoClip]) -> Result<Var> {
        if new.is_empty() {
            return Err(CramError::InvalidArgument("compressor step needs at least one new clip".into()));
        }
        for c in new.iter().chain(replay) {
            self.check_geometry(c)?;
        }
        let codebook = self.bind(tape, CODEBOOK);
        let new_refs: Vec<&VideoClip> = new.iter().collect();
        let mut loss = self.set_loss(tape, &new_refs, codebook)?;
        if !replay.is_empty() {
            let replay_refs: Vec<&VideoClip> = replay.iter().collect();
            let r = self.set_loss(tape, &replay_refs, codebook)?;
            loss = tape.add(loss, r)?;
        }
        Ok(loss)
    }

    /// One optimizer step on encoder, decoder and codebook; returns the loss.
    ///
    /// Replay clips must be reconstructions from an earlier (frozen)
    /// compressor version or pixels read back from a raw buffer.
    pub fn train_step(&mut self, opt: &mut Optimizer, new: &[VideoClip], replay: &[VideoClip]) -> Result<f64> {
        if let Some(bad) = new.iter().find(|c| c.provenance != Provenance::Source) {
            return Err(CramError::InvalidArgument(format!(
                "new clip {} has provenance {:?}",
                bad.clip_id, bad.provenance
            )));
        }
        for c in replay {
            match c.provenance {
                Provenance::Decoded { version } if version < self.version => {}
                Provenance::Stored => {}
                other => {
                    return Err(CramError::InvalidArgument(format!(
                        "replay clip {} has provenance {other:?}; expected a reconstruction from a version before {}",
                        c.clip_id, self.version
                    )))
                }
            }
        }
        let mut tape = Tape::new();
        let loss = self.objective(&mut tape, new, replay)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(CramError::NonFinite("compressor loss".into()));
        }
        let grads = tape.backward(loss)?;
        self.params.absorb(&grads);
        opt.step(&mut self.params)?;
        Ok(value)
    }

    /// Mean reconstruction MSE of `decode(encode(x))` against `x`.
    pub fn reconstruction_mse(&self, clips: &[VideoClip]) -> Result<f64> {
        let codes = self.encode_batch(clips)?;
        let recon = self.decode_batch(&codes)?;
        let total: f64 = clips
            .iter()
            .zip(&recon)
            .map(|(a, b)| {
                a.frames
                    .data()
                    .iter()
                    .zip(b.frames.data())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    / a.frames.len() as f64
            })
            .sum();
        Ok(total / clips.len() as f64)
    }

    /// Snapshot the current state and advance the working copy one version.
    pub fn freeze(&mut self) -> Arc<Compressor> {
        let snapshot = Arc::new(self.clone());
        self.version += 1;
        snapshot
    }
}

/// How many frozen compressor snapshots a strategy keeps resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    /// Only the latest snapshot.
    LatestOnly,
    /// The latest snapshot and the one before it.
    PreviousOnly,
    /// Every snapshot ever frozen.
    All,
}

#[derive(Debug, Clone)]
pub struct SnapshotHistory {
    retention: Retention,
    snapshots: Vec<Arc<Compressor>>,
}

impl SnapshotHistory {
    pub fn new(retention: Retention) -> Self {
        SnapshotHistory {
            retention,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, snapshot: Arc<Compressor>) {
        self.snapshots.push(snapshot);
        let keep = match self.retention {
            Retention::LatestOnly => 1,
            Retention::PreviousOnly => 2,
            Retention::All => usize::MAX,
        };
        if self.snapshots.len() > keep {
            self.snapshots.remove(0);
        }
    }

    pub fn latest(&self) -> Option<&Arc<Compressor>> {
        self.snapshots.last()
    }

    /// The snapshot before the latest one.
    pub fn previous(&self) -> Option<&Arc<Compressor>> {
        self.snapshots.len().checked_sub(2).map(|i| &self.snapshots[i])
    }

    pub fn get(&self, version: u32) -> Option<&Arc<Compressor>> {
        self.snapshots.iter().find(|s| s.version() == version)
    }

    pub fn versions(&self) -> Vec<u32> {
        self.snapshots.iter().map(|s| s.version()).collect()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Total serialized size of every retained snapshot.
    pub fn bytes(&self) -> u64 {
        self.snapshots.iter().map(|s| s.snapshot_bytes()).sum()
    }
}
