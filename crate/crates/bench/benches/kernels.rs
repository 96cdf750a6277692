use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use cram_bench::{clips, random_tensor, refresh_fixture};
use cram_core::codec::vq::nearest_codewords;
use cram_core::codec::{CodecConfig, Compressor};
use cram_core::tensorcore::Tape;

fn conv(c: &mut Criterion) {
    // First encoder layer at the default geometry, batch of 8.
    let x = random_tensor("bench/x", &[8, 3, 8, 32, 32]);
    let w = random_tensor("bench/w", &[16, 3, 1, 4, 4]);
    c.bench_function("conv3d forward+backward 8x3x8x32x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.conv3d(xv, wv, [1, 2, 2], [0, 1, 1]).unwrap();
            let loss = tape.mean(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn vq(c: &mut Criterion) {
    let latents = random_tensor("bench/latents", &[2048, 8]);
    let codebook = random_tensor("bench/codebook", &[256, 8]);
    c.bench_function("nearest codewords 2048 x 256", |b| {
        b.iter(|| black_box(nearest_codewords(latents.data(), codebook.data(), 8)))
    });
    let compressor = Compressor::new(CodecConfig::default(), 0).unwrap();
    let batch = clips(16);
    c.bench_function("encode 16 clips", |b| b.iter(|| black_box(compressor.encode_batch(&batch).unwrap())));
}

fn refresh(c: &mut Criterion) {
    let (buffer, prev, curr) = refresh_fixture(64);
    c.bench_function("refresh 64 codes", |b| {
        b.iter_batched(
            || buffer.clone(),
            |mut buf| black_box(buf.refresh(&prev, &curr).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, vq, refresh
}
criterion_main!(benches);
