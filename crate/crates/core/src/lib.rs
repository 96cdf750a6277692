//! Continual learning over video streams with a compressed, refreshed
//! rehearsal buffer.
//!
//! A vector-quantized video autoencoder is trained online, one task at a
//! time. Past clips are kept as grids of codebook indices; at every task
//! boundary the stored codes are decoded with the previous compressor and
//! re-encoded with the new one, so the buffer always matches the current
//! encoder while only two compressor snapshots are ever resident.

pub mod error;
pub mod classifier;
pub mod codec;
pub mod datagen;
pub mod membuf;
pub mod metrics;
pub mod protocol;
pub mod rng;
pub mod tensorcore;

pub use error::{CramError, Result};
