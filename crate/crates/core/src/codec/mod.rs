//! Vector-quantized video compression: clips in, index grids out, and back.

mod clip;
mod code;
mod compressor;
pub mod vq;

use serde::{Deserialize, Serialize};

pub use clip::{clips_from_bytes, clips_to_bytes, Provenance, VideoClip, CLIPS_MAGIC};
pub use code::{bytes_per_index, NeuralCode, CODE_MAGIC, CODE_METADATA_BYTES};
pub use compressor::{clips_to_batch, Compressor, Retention, SnapshotHistory};

use crate::error::{CramError, Result};

/// Geometry and hyperparameters of the compressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// `[T, H, W]` of an input clip.
    pub clip: [usize; 3],
    /// `[s, h, w]` of the index grid.
    pub grid: [usize; 3],
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Channels of the hidden conv layers.
    pub hidden: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            clip: [8, 32, 32],
            grid: [4, 8, 8],
            codebook_size: 256,
            latent_dim: 8,
            hidden: 16,
            beta: 0.25,
        }
    }
}

impl CodecConfig {
    /// Sixteen-frame clips on the same grid: twice the temporal compression.
    pub fn deep() -> Self {
        CodecConfig {
            clip: [16, 32, 32],
            ..CodecConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.clip;
        let [s, gh, gw] = self.grid;
        if self.clip.contains(&0) || self.grid.contains(&0) {
            return Err(CramError::config("clip_geometry", "dimensions must be positive"));
        }
        if h != 4 * gh || w != 4 * gw {
            return Err(CramError::config(
                "clip_geometry",
                format!("spatial size {h}x{w} must be 4x the grid {gh}x{gw}"),
            ));
        }
        if t % s != 0 {
            return Err(CramError::config(
                "clip_geometry",
                format!("{t} frames do not divide into {s} code slices"),
            ));
        }
        if self.codebook_size < 2 || self.codebook_size > usize::from(u16::MAX) + 1 {
            return Err(CramError::config("codebook_size", "must be in 2..=65536"));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(CramError::config("codec", "latent_dim and hidden must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CramError::config("codec.beta", "must be non-negative"));
        }
        Ok(())
    }

    pub fn temporal_factor(&self) -> usize {
        self.clip[0] / self.grid[0]
    }

    /// Bytes of one clip at one byte per channel.
    pub fn raw_clip_bytes(&self) -> u64 {
        self.clip.iter().product::<usize>() as u64 * 3
    }

    /// Index payload of one code, without metadata.
    pub fn code_index_bytes(&self) -> u64 {
        self.grid.iter().product::<usize>() as u64 * bytes_per_index(self.codebook_size)
    }

    /// Bytes one code occupies in the rehearsal buffer.
    pub fn code_bytes(&self) -> u64 {
        self.code_index_bytes() + CODE_METADATA_BYTES
    }
}
