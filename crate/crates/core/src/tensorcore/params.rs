//! Named parameters and the `CRAMW1` weight snapshot format.
//!
//! Layout (all integers little-endian):
//! `"CRAMW1"`, format version `u32`, then per parameter: name length `u32`,
//! UTF-8 name, rank `u32`, each dim `u32`, then the `f64` values.

use std::path::Path;

use rand::Rng as _;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{CramError, Result};
use crate::rng;

pub const WEIGHTS_MAGIC: &[u8; 6] = b"CRAMW1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(CramError::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad: None,
        });
        Ok(self.params.len() - 1)
    }

    /// Kaiming-uniform init (`U(-b, b)`, `b = sqrt(6 / fan_in)`) from the stream named by `name`.
    pub fn add_kaiming(&mut self, seed: u64, name: &str, shape: &[usize]) -> Result<usize> {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        self.add_uniform(seed, name, shape, (6.0 / fan_in as f64).sqrt())
    }

    /// `U(-bound, bound)` init from the stream named by `name`.
    pub fn add_uniform(&mut self, seed: u64, name: &str, shape: &[usize], bound: f64) -> Result<usize> {
        let mut rng = rng::stream(seed, &format!("init/{name}"));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Record parameter `index` on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape, index: usize) -> Var {
        tape.param_leaf(self.params[index].tensor.clone(), index)
    }

    /// Add the parameter gradients found in `grads` to each `Parameter::grad`.
    pub fn absorb(&mut self, grads: &Gradients) {
        for (index, g) in grads.param_grads() {
            let p = &mut self.params[index];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.value_count() * 8);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "weights");
        if r.take(6)? != WEIGHTS_MAGIC {
            return Err(CramError::format("weights", "bad magic"));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(CramError::format("weights", format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new();
        while !r.is_empty() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CramError::format("weights", e.to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.add(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| CramError::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CramError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Size in bytes of the serialized snapshot, without serializing.
    pub fn serialized_len(&self) -> u64 {
        let header = 10;
        let body: usize = self
            .params
            .iter()
            .map(|p| 4 + p.name.len() + 4 + 4 * p.tensor.shape().len() + 8 * p.tensor.len())
            .sum();
        (header + body) as u64
    }
}

/// Little-endian cursor used by every binary format in the crate.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        ByteReader { bytes, pos: 0, kind }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CramError::format(self.kind, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
