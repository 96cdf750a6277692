use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::tensorcore::ByteReader;

/// Per-code metadata charged against the memory budget: version, label,
/// clip id, task id and padding.
pub const CODE_METADATA_BYTES: u64 = 24;

pub const CODE_MAGIC: &[u8; 6] = b"CRAMC1";

/// A compressed clip: an `[s, h, w]` grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralCode {
    pub indices: Vec<u16>,
    pub grid: [usize; 3],
    /// Version of the compressor whose encoder produced `indices`.
    pub version: u32,
    pub label: u32,
    pub clip_id: u64,
    pub task_id: u32,
}

/// Storage width of one index for a codebook of `codebook_size` entries.
pub fn bytes_per_index(codebook_size: usize) -> u64 {
    if codebook_size <= 256 {
        1
    } else {
        2
    }
}

impl NeuralCode {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Bytes this code occupies in a rehearsal buffer.
    pub fn byte_size(&self, codebook_size: usize) -> u64 {
        self.indices.len() as u64 * bytes_per_index(codebook_size) + CODE_METADATA_BYTES
    }

    /// `"CRAMC1"`, `s, h, w` (`u32`), version `u32`, label `u32`, clip_id `u64`,
    /// task_id `u32`, then the indices at `bytes_per_index(codebook_size)` each.
    pub fn write_to(&self, out: &mut Vec<u8>, codebook_size: usize) {
        out.extend_from_slice(CODE_MAGIC);
        for d in self.grid {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.label.to_le_bytes());
        out.extend_from_slice(&self.clip_id.to_le_bytes());
        out.extend_from_slice(&self.task_id.to_le_bytes());
        match bytes_per_index(codebook_size) {
            1 => out.extend(self.indices.iter().map(|&i| i as u8)),
            _ => self.indices.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes())),
        }
    }

    pub fn to_bytes(&self, codebook_size: usize) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out, codebook_size);
        out
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, codebook_size: usize) -> Result<Self> {
        if r.take(6)? != CODE_MAGIC {
            return Err(CramError::format("code", "bad magic"));
        }
        let grid = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let version = r.u32()?;
        let label = r.u32()?;
        let clip_id = r.u64()?;
        let task_id = r.u32()?;
        let n = grid.iter().product::<usize>();
        let indices = match bytes_per_index(codebook_size) {
            1 => r.take(n)?.iter().map(|&b| u16::from(b)).collect(),
            _ => r
                .take(2 * n)?
                .chunks(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        };
        let code = NeuralCode {
            indices,
            grid,
            version,
            label,
            clip_id,
            task_id,
        };
        if let Some(&bad) = code.indices.iter().find(|&&i| usize::from(i) >= codebook_size) {
            return Err(CramError::format("code", format!("index {bad} >= codebook size {codebook_size}")));
        }
        Ok(code)
    }

    pub fn from_bytes(bytes: &[u8], codebook_size: usize) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "code");
        let code = Self::read_from(&mut r, codebook_size)?;
        if !r.is_empty() {
            return Err(CramError::format("code", "trailing bytes"));
        }
        Ok(code)
    }
}
