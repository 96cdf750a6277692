use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::tensorcore::{ByteReader, Tensor};

/// Where the pixels of a clip came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Straight from the data stream.
    Source,
    /// Decoded from a neural code by the compressor of this version.
    Decoded { version: u32 },
    /// Read back from a raw-pixel rehearsal buffer.
    Stored,
}

/// A `[T, H, W, 3]` block of frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: u32,
    pub clip_id: u64,
    pub task_id: u32,
    /// Clips cut from the same long video share this id.
    pub video_id: u64,
    pub provenance: Provenance,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: u32, clip_id: u64, task_id: u32) -> Result<Self> {
        let clip = VideoClip {
            frames,
            label,
            clip_id,
            task_id,
            video_id: clip_id,
            provenance: Provenance::Source,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(CramError::InvalidShape {
                op: "video_clip",
                detail: format!("frames must be [T, H, W, 3], got {s:?}"),
            });
        }
        if let Some(bad) = self.frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CramError::InvalidArgument(format!(
                "clip {} has pixel value {bad} outside [0, 1]",
                self.clip_id
            )));
        }
        Ok(())
    }

    /// `[T, H, W]`
    pub fn geometry(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[0], s[1], s[2]]
    }

    pub fn raw_bytes(&self) -> u64 {
        self.frames.len() as u64
    }

    /// Round every channel to 8 bits, as a raw-pixel buffer stores it.
    pub fn quantized_u8(&self) -> Vec<u8> {
        self.frames.data().iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(template: &VideoClip, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(VideoClip {
            frames: Tensor::new(template.frames.shape().to_vec(), data)?,
            provenance: Provenance::Stored,
            ..template.clone()
        })
    }
}

pub const CLIPS_MAGIC: &[u8; 6] = b"CRAMV1";

/// Inspection dump: `"CRAMV1"`, clip count `u64`, then per clip
/// `T, H, W` (`u32`), label `u32`, clip_id `u64`, task_id `u32`, video_id `u64`,
/// and `T*H*W*3` little-endian `f64` values.
pub fn clips_to_bytes(clips: &[VideoClip]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CLIPS_MAGIC);
    out.extend_from_slice(&(clips.len() as u64).to_le_bytes());
    for c in clips {
        for d in c.geometry() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.label.to_le_bytes());
        out.extend_from_slice(&c.clip_id.to_le_bytes());
        out.extend_from_slice(&c.task_id.to_le_bytes());
        out.extend_from_slice(&c.video_id.to_le_bytes());
        for v in c.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn clips_from_bytes(bytes: &[u8]) -> Result<Vec<VideoClip>> {
    let mut r = ByteReader::new(bytes, "clips");
    if r.take(6)? != CLIPS_MAGIC {
        return Err(CramError::format("clips", "bad magic"));
    }
    let n = r.u64()?;
    let mut clips = Vec::new();
    for _ in 0..n {
        let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let label = r.u32()?;
        let clip_id = r.u64()?;
        let task_id = r.u32()?;
        let video_id = r.u64()?;
        let data = (0..t * h * w * 3).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut clip = VideoClip::new(Tensor::new(vec![t, h, w, 3], data)?, label, clip_id, task_id)?;
        clip.video_id = video_id;
        clips.push(clip);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(v: f64) -> VideoClip {
        VideoClip::new(Tensor::new(vec![2, 2, 2, 3], vec![v; 24]).unwrap(), 3, 9, 1).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels_and_bad_shapes() {
        assert!(VideoClip::new(Tensor::new(vec![1, 1, 1, 3], vec![0.0, 1.5, 0.0]).unwrap(), 0, 0, 0).is_err());
        assert!(VideoClip::new(Tensor::zeros(&[1, 2, 2, 4]), 0, 0, 0).is_err());
    }

    #[test]
    fn u8_storage_is_within_half_a_level() {
        let c = clip(0.3);
        let back = VideoClip::from_u8(&c, &c.quantized_u8()).unwrap();
        assert_eq!(back.provenance, Provenance::Stored);
        for (a, b) in c.frames.data().iter().zip(back.frames.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn dump_roundtrip() {
        let clips = vec![clip(0.25), clip(1.0)];
        let back = clips_from_bytes(&clips_to_bytes(&clips)).unwrap();
        assert_eq!(back, clips);
    }
}
