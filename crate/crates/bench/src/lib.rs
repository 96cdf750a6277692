//! Fixtures shared by the benchmarks.

use cram_core::codec::{CodecConfig, Compressor, VideoClip};
use cram_core::datagen::{generate, StreamSpec};
use cram_core::membuf::{MemoryBudget, RehearsalBuffer, Setting};
use cram_core::rng;
use cram_core::tensorcore::Tensor;
use rand::Rng as _;

pub use cram_core::codec::NeuralCode;

/// Uniform values in `[-1, 1)` from a named stream.
pub fn random_tensor(name: &str, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(0, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `n` training clips of the default geometry.
pub fn clips(n: usize) -> Vec<VideoClip> {
    let spec = StreamSpec {
        task_classes: vec![4],
        clips_per_class_train: n.div_ceil(4),
        clips_per_class_eval: 1,
        ..StreamSpec::default()
    };
    let mut all = generate(&spec).expect("default spec is valid").tasks.remove(0).train;
    all.truncate(n);
    all
}

/// A buffer of `n` codes from version 1, plus the version-2 compressor that
/// refreshes them.
pub fn refresh_fixture(n: usize) -> (RehearsalBuffer, Compressor, Compressor) {
    let mut working = Compressor::new(CodecConfig::default(), 0).expect("default codec is valid");
    let prev = working.freeze();
    let curr = working.freeze();
    let budget = MemoryBudget {
        budget_bytes: u64::MAX,
        setting: Setting::Incremental,
    };
    let mut buffer = RehearsalBuffer::new(budget, CodecConfig::default().code_bytes()).expect("unbounded budget");
    let codes = prev.encode_batch(&clips(n)).expect("clips match the codec");
    buffer.admit(codes, 2, &mut rng::stream(0, "bench/admit")).expect("admission fits");
    (buffer, (*prev).clone(), (*curr).clone())
}
