//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! The training criteria share one set of runs on the shipped configs, so
//! this target takes a quarter of an hour on a single core.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cram_cli::output::{write_run, ACCURACY_FILE, METRICS_FILE};
use cram_core::codec::vq::nearest_codewords;
use cram_core::codec::{CodecConfig, Compressor, VideoClip, CODE_METADATA_BYTES};
use cram_core::membuf::Setting;
use cram_core::metrics::{avg_forgetting, compression_report, Event, ForgettingVariant, RunLedger, RunMetrics};
use cram_core::protocol::{run, RunConfig};
use cram_core::tensorcore::{Tape, Tensor, Var};

const SEEDS: [u64; 3] = [0, 1, 2];
const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

type Verdict = Result<String, String>;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn shipped(name: &str, overrides: &[String]) -> RunConfig {
    RunConfig::load(&config_path(name)).unwrap().with_overrides(overrides).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Central differences of `f` around `x`, one coordinate at a time.
fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + EPS;
            let plus = f(&probe);
            probe[i] = x[i] - EPS;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * EPS)
        })
        .collect()
}

/// Worst relative error over every input of a scalar graph.
fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
        let numeric = numeric_gradient(x.data(), |probe| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let v = if j == k { Tensor::new(v.shape().to_vec(), probe.to_vec()).unwrap() } else { v.clone() };
                    t.constant(v)
                })
                .collect();
            let out = build(&mut t, &vs);
            t.value(out).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn check_ops() -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let (a, b) = (r(&[3, 4]), r(&[3, 4]));
    let mut out = vec![
        ("add", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("sub", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("mul", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            t.sum(y)
        })),
        ("scale", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.scale(v[0], -2.5);
            let y = t.mul(y, v[1]).unwrap();
            t.sum(y)
        })),
        ("relu", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.relu(v[0]);
            let y = t.mul(y, v[1]).unwrap();
            t.sum(y)
        })),
        ("leaky_relu", gradcheck(&[a.clone(), b.clone()], |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            let y = t.mul(y, v[1]).unwrap();
            t.sum(y)
        })),
        ("sum", gradcheck(&[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y)
        })),
        ("mean", gradcheck(&[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y)
        })),
        ("mean_last", gradcheck(&[a.clone()], |t, v| {
            let m = t.mean_last(v[0]).unwrap();
            let m = t.mul(m, m).unwrap();
            t.sum(m)
        })),
        ("mse", gradcheck(&[a.clone(), b.clone()], |t, v| t.mse(v[0], v[1]).unwrap())),
        ("transpose", gradcheck(&[a.clone(), r(&[3, 4])], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            let y = t.matmul(v[1], y).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("matmul", gradcheck(&[r(&[3, 5]), r(&[5, 2])], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("reshape", gradcheck(&[r(&[2, 6]), r(&[3, 4])], |t, v| {
            let y = t.reshape(v[0], &[3, 4]).unwrap();
            let y = t.mul(y, v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("permute", gradcheck(&[r(&[2, 3, 4]), r(&[4, 2, 3])], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1]).unwrap();
            let y = t.mul(y, v[1]).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("bias_add", gradcheck(&[r(&[2, 3, 4]), r(&[3])], |t, v| {
            let y = t.bias_add(v[0], v[1], 1).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y)
        })),
        ("conv3d", gradcheck(&[r(&[2, 2, 4, 6, 6]), r(&[3, 2, 2, 4, 4]), r(&[2, 3, 2, 3, 3])], |t, v| {
            let y = t.conv3d(v[0], v[1], [2, 2, 2], [0, 1, 1]).unwrap();
            t.mse(y, v[2]).unwrap()
        })),
        ("conv_transpose3d", gradcheck(&[r(&[2, 3, 2, 3, 3]), r(&[3, 2, 2, 4, 4]), r(&[2, 2, 4, 6, 6])], |t, v| {
            let y = t.conv_transpose3d(v[0], v[1], [2, 2, 2], [0, 1, 1]).unwrap();
            t.mse(y, v[2]).unwrap()
        })),
        ("conv2d", gradcheck(&[r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]), r(&[2, 3, 5, 5])], |t, v| {
            let y = t.conv2d(v[0], v[1], [1, 1], [1, 1]).unwrap();
            t.mse(y, v[2]).unwrap()
        })),
        ("softmax_cross_entropy", gradcheck(&[r(&[4, 5])], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 3, 4, 3]).unwrap()
        })),
        ("gather_rows", gradcheck(&[r(&[6, 3]), r(&[5, 3])], |t, v| {
            let g = t.gather_rows(v[0], &[1, 1, 5, 0, 2]).unwrap();
            t.mse(g, v[1]).unwrap()
        })),
    ];

    // Stop-gradient has no numeric derivative to compare against; its
    // contract is that nothing flows back through it.
    let (x, y) = (r(&[3, 4]), r(&[3, 4]));
    let mut tape = Tape::new();
    let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y));
    let d = tape.detach(xv);
    let p = tape.mul(d, yv).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    if grads.get(xv).is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
        return Err("detach leaked gradient".into());
    }
    if grads.get(yv) != Some(x.data()) {
        return Err("detach changed the other factor's gradient".into());
    }
    out.push(("detach", 0.0));

    // Straight-through: the gradient reaching the continuous input equals
    // the numeric derivative of the downstream loss in the quantized value.
    let (z, q, target) = (r(&[5, 3]), r(&[5, 3]), r(&[5, 3]));
    let mut tape = Tape::new();
    let zv = tape.leaf(z);
    let qv = tape.constant(q.clone());
    let st = tape.pass_through(zv, qv).unwrap();
    if tape.value(st).data() != q.data() {
        return Err("pass-through does not forward the quantized value".into());
    }
    let tv = tape.constant(target.clone());
    let loss = tape.mse(st, tv).unwrap();
    let analytic = tape.backward(loss).unwrap().get(zv).unwrap().to_vec();
    let numeric = numeric_gradient(q.data(), |probe| {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![5, 3], probe.to_vec()).unwrap());
        let b = t.constant(target.clone());
        let l = t.mse(a, b).unwrap();
        t.value(l).item()
    });
    out.push(("pass_through", relative_error(&analytic, &numeric)));
    Ok(out)
}

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        clip: [2, 8, 8],
        grid: [1, 2, 2],
        codebook_size: 4,
        latent_dim: 2,
        hidden: 3,
        beta: 0.25,
    }
}

fn random_clips(rng: &mut ChaCha8Rng, geometry: [usize; 3], n: usize) -> Vec<VideoClip> {
    let [t, h, w] = geometry;
    (0..n)
        .map(|i| {
            let data = (0..t * h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            VideoClip::new(Tensor::new(vec![t, h, w, 3], data).unwrap(), 0, i as u64, 0).unwrap()
        })
        .collect()
}

/// `[N, T, H, W, 3]` clips as a channels-first `[N, 3, T, H, W]` tensor.
fn batch(clips: &[VideoClip]) -> Tensor {
    let [t, h, w] = clips[0].geometry();
    let mut shape = vec![clips.len(), t, h, w, 3];
    let data: Vec<f64> = clips.iter().flat_map(|c| c.frames.data().iter().copied()).collect();
    let mut out = vec![0.0; data.len()];
    for n in 0..clips.len() {
        for p in 0..t * h * w {
            for c in 0..3 {
                out[((n * 3 + c) * t * h * w) + p] = data[(n * t * h * w + p) * 3 + c];
            }
        }
    }
    shape = vec![shape[0], 3, shape[1], shape[2], shape[3]];
    Tensor::new(shape, out).unwrap()
}

/// Values the straight-through estimator treats as constants, taken at the
/// unperturbed parameters.
struct Frozen {
    rows: Tensor,
    quantized: Tensor,
    indices: Vec<usize>,
}

/// The compressor objective rebuilt from public tape ops, with quantization
/// replaced by its straight-through linearization around `frozen`. Its true
/// gradient is what the straight-through estimator reports.
struct Surrogate {
    codec: CodecConfig,
    names: Vec<String>,
    sets: Vec<Tensor>,
}

impl Surrogate {
    fn encode(&self, t: &mut Tape, p: &HashMap<&str, Var>, x: Var) -> Var {
        let ft = self.codec.clip[0] / self.codec.grid[0];
        let h = t.conv3d(x, p["encoder.conv1.weight"], [1, 2, 2], [0, 1, 1]).unwrap();
        let h = t.bias_add(h, p["encoder.conv1.bias"], 1).unwrap();
        let h = t.relu(h);
        let h = t.conv3d(h, p["encoder.conv2.weight"], [ft, 2, 2], [0, 1, 1]).unwrap();
        let h = t.bias_add(h, p["encoder.conv2.bias"], 1).unwrap();
        let h = t.relu(h);
        let z = t.conv3d(h, p["encoder.conv3.weight"], [1, 1, 1], [0, 0, 0]).unwrap();
        let z = t.bias_add(z, p["encoder.conv3.bias"], 1).unwrap();
        let s = t.shape(z).to_vec();
        let z = t.permute(z, &[0, 2, 3, 4, 1]).unwrap();
        t.reshape(z, &[s[0] * s[2] * s[3] * s[4], s[1]]).unwrap()
    }

    fn decode(&self, t: &mut Tape, p: &HashMap<&str, Var>, rows: Var, n: usize) -> Var {
        let ft = self.codec.clip[0] / self.codec.grid[0];
        let [s, h, w] = self.codec.grid;
        let z = t.reshape(rows, &[n, s, h, w, self.codec.latent_dim]).unwrap();
        let z = t.permute(z, &[0, 4, 1, 2, 3]).unwrap();
        let h = t.conv3d(z, p["decoder.conv1.weight"], [1, 1, 1], [0, 0, 0]).unwrap();
        let h = t.bias_add(h, p["decoder.conv1.bias"], 1).unwrap();
        let h = t.relu(h);
        let h = t.conv_transpose3d(h, p["decoder.deconv1.weight"], [ft, 2, 2], [0, 1, 1]).unwrap();
        let h = t.bias_add(h, p["decoder.deconv1.bias"], 1).unwrap();
        let h = t.relu(h);
        let y = t.conv_transpose3d(h, p["decoder.deconv2.weight"], [1, 2, 2], [0, 1, 1]).unwrap();
        t.bias_add(y, p["decoder.deconv2.bias"], 1).unwrap()
    }

    fn freeze(&self, params: &[Tensor]) -> Vec<Frozen> {
        let mut t = Tape::new();
        let p = self.bind(&mut t, params, false);
        let codebook = params[self.index("codebook")].data();
        self.sets
            .iter()
            .map(|x| {
                let xv = t.constant(x.clone());
                let rows = self.encode(&mut t, &p, xv);
                let rows = t.value(rows).clone();
                let d = self.codec.latent_dim;
                let indices = nearest_codewords(rows.data(), codebook, d);
                let q: Vec<f64> = indices.iter().flat_map(|&k| codebook[k * d..(k + 1) * d].to_vec()).collect();
                let quantized = Tensor::new(rows.shape().to_vec(), q).unwrap();
                Frozen { rows, quantized, indices }
            })
            .collect()
    }

    fn index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).unwrap()
    }

    fn bind<'a>(&'a self, t: &mut Tape, params: &[Tensor], leaves: bool) -> HashMap<&'a str, Var> {
        self.names
            .iter()
            .zip(params)
            .map(|(n, p)| (n.as_str(), if leaves { t.leaf(p.clone()) } else { t.constant(p.clone()) }))
            .collect()
    }

    fn loss(&self, t: &mut Tape, p: &HashMap<&str, Var>, frozen: &[Frozen]) -> Var {
        let mut total = None;
        for (x, f) in self.sets.iter().zip(frozen) {
            let xv = t.constant(x.clone());
            let rows = self.encode(t, p, xv);
            let offset = t.constant(Tensor::new(
                f.rows.shape().to_vec(),
                f.quantized.data().iter().zip(f.rows.data()).map(|(q, z)| q - z).collect(),
            )
            .unwrap());
            let straight = t.add(rows, offset).unwrap();
            let recon = self.decode(t, p, straight, x.shape()[0]);
            let rec = t.mse(recon, xv).unwrap();
            let e = t.gather_rows(p["codebook"], &f.indices).unwrap();
            let z0 = t.constant(f.rows.clone());
            let codebook_term = t.mse(z0, e).unwrap();
            let e0 = t.constant(f.quantized.clone());
            let commit = t.mse(rows, e0).unwrap();
            let commit = t.scale(commit, self.codec.beta);
            let l = t.add(rec, codebook_term).unwrap();
            let l = t.add(l, commit).unwrap();
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l).unwrap(),
            });
        }
        total.unwrap()
    }
}

fn check_compressor_objective() -> Result<f64, String> {
    let codec = tiny_codec();
    let compressor = Compressor::new(codec.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let new = random_clips(&mut rng, codec.clip, 2);
    let replay = random_clips(&mut rng, codec.clip, 1);

    let mut tape = Tape::new();
    let loss = compressor.objective(&mut tape, &new, &replay).unwrap();
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let mut analytic: Vec<Vec<f64>> = compressor.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    for (i, g) in grads.param_grads() {
        for (a, b) in analytic[i].iter_mut().zip(g) {
            *a += b;
        }
    }

    let names: Vec<String> = compressor.params().iter().map(|p| p.name.clone()).collect();
    let base: Vec<Tensor> = compressor.params().iter().map(|p| p.tensor.clone()).collect();
    let surrogate = Surrogate {
        codec: codec.clone(),
        names: names.clone(),
        sets: vec![batch(&new), batch(&replay)],
    };
    let frozen = surrogate.freeze(&base);
    let mut t = Tape::new();
    let p = surrogate.bind(&mut t, &base, true);
    let s = surrogate.loss(&mut t, &p, &frozen);
    let s_value = t.value(s).item();
    if (s_value - value).abs() > 1e-12 * value.abs().max(1.0) {
        return Err(format!("rebuilt objective {s_value} differs from {value}"));
    }
    let vars: Vec<Var> = names.iter().map(|n| p[n.as_str()]).collect();
    let s_grads = t.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (i, name) in names.iter().enumerate() {
        let rebuilt = s_grads.get(vars[i]).map_or_else(|| vec![0.0; base[i].len()], <[f64]>::to_vec);
        let err = relative_error(&analytic[i], &rebuilt);
        if err > 1e-10 {
            return Err(format!("{name}: rebuilt gradient differs by {err:.2e}"));
        }
        let numeric = numeric_gradient(base[i].data(), |probe| {
            let mut perturbed = base.clone();
            perturbed[i] = Tensor::new(base[i].shape().to_vec(), probe.to_vec()).unwrap();
            let mut t = Tape::new();
            let p = surrogate.bind(&mut t, &perturbed, false);
            let l = surrogate.loss(&mut t, &p, &frozen);
            t.value(l).item()
        });
        let err = relative_error(&analytic[i], &numeric);
        if err >= GRAD_TOL {
            return Err(format!("{name}: relative error {err:.2e}"));
        }
        worst = worst.max(err);
        // No stop-gradient sits between the decoder and the loss, so its
        // gradient is the plain derivative of the shipped objective.
        if name.starts_with("decoder.") {
            let numeric = numeric_gradient(base[i].data(), |probe| {
                let mut params = compressor.params().clone();
                params.get_mut(i).tensor = Tensor::new(base[i].shape().to_vec(), probe.to_vec()).unwrap();
                let c = Compressor::from_params(codec.clone(), params, 1).unwrap();
                let mut t = Tape::new();
                let l = c.objective(&mut t, &new, &replay).unwrap();
                t.value(l).item()
            });
            let err = relative_error(&analytic[i], &numeric);
            if err >= GRAD_TOL {
                return Err(format!("{name}: relative error {err:.2e} against the objective itself"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let ops = check_ops()?;
    let bad: Vec<String> = ops
        .iter()
        .filter(|(_, e)| *e >= GRAD_TOL)
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    if !bad.is_empty() {
        return Err(format!("ops over tolerance: {}", bad.join(", ")));
    }
    let worst_op = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let worst_loss = check_compressor_objective()?;
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {elapsed:.1?}"));
    }
    Ok(format!(
        "{} ops, worst {worst_op:.1e}; compressor objective worst {worst_loss:.1e}; {elapsed:.1?}",
        ops.len()
    ))
}

fn c2_vq_oracle() -> Verdict {
    let (n, k, d) = (1000, 256, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut codebook: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Duplicate codewords exercise the lowest-index tie rule.
    let dup = codebook[3 * d..4 * d].to_vec();
    codebook[200 * d..201 * d].copy_from_slice(&dup);
    let mut latents: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.2..1.2)).collect();
    for i in 0..20 {
        let src = rng.gen_range(0..k);
        let row = codebook[src * d..(src + 1) * d].to_vec();
        latents[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    let start = Instant::now();
    let got = nearest_codewords(&latents, &codebook, d);
    let elapsed = start.elapsed();
    let mut mismatches = 0;
    for (i, z) in latents.chunks(d).enumerate() {
        let dists: Vec<f64> = codebook
            .chunks(d)
            .map(|e| z.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = dists.iter().position(|&x| x == min).unwrap();
        if got[i] != expected {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches} of {n} indices differ"));
    }
    Ok(format!("{n} latents x {k} codewords exact; {elapsed:.1?}"))
}

/// Forgetting of every past task, straight from the definitions.
fn forgetting_oracle(a: &[Vec<f64>], variant: ForgettingVariant) -> f64 {
    let t = a.len();
    let mut sum = 0.0;
    for i in 0..t - 1 {
        let now = a[t - 1][i];
        let drop = match variant {
            ForgettingVariant::LastSelf => a[i][i] - now,
            ForgettingVariant::Max => {
                let mut best = f64::NEG_INFINITY;
                for row in &a[i..t - 1] {
                    if row[i] - now > best {
                        best = row[i] - now;
                    }
                }
                best
            }
        };
        sum += drop;
    }
    sum / (t - 1) as f64
}

fn c3_forgetting_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tasks = rng.gen_range(2..=8);
        let a: Vec<Vec<f64>> = (1..=tasks).map(|len| (0..len).map(|_| rng.gen_range(0.0..=1.0)).collect()).collect();
        for variant in [ForgettingVariant::Max, ForgettingVariant::LastSelf] {
            let got = avg_forgetting(&a, tasks, variant).map_err(|e| e.to_string())?;
            let err = (got - forgetting_oracle(&a, variant)).abs();
            if err > 1e-12 {
                return Err(format!("{variant:?} off by {err:e} on a {tasks}-task matrix"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("100 matrices, both variants, worst {worst:.1e}"))
}

const TEN_TASKS: &str = r#"
seed = 7
tasks = 10
classes_per_task = 2
batch_size = 8

[data]
clips_per_class_train = 10
clips_per_class_eval = 4

[clip_geometry]
clip = [8, 16, 16]
grid = [4, 4, 4]

[epochs]
compressor = 1
classifier = 2
"#;

/// 45 codes of 64 index bytes, plus slack short of one more entry.
fn ten_task_budget() -> u64 {
    45 * (64 + CODE_METADATA_BYTES) + 63
}

fn ten_task_config(strategy: &str) -> RunConfig {
    let text = format!("budget_bytes = {}\nstrategy = \"{strategy}\"\n{TEN_TASKS}", ten_task_budget());
    RunConfig::from_toml(&text).unwrap()
}

fn admits(ledger: &RunLedger) -> Vec<(u32, usize, Vec<(u32, usize)>)> {
    ledger
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Admit { task, quota, per_task, .. } => Some((*task, *quota, per_task.clone())),
            _ => None,
        })
        .collect()
}

fn refresh_count(ledger: &RunLedger) -> usize {
    ledger.events.iter().filter(|e| matches!(e, Event::Refresh { .. })).count()
}

/// Every admission leaves each stored task at its quota, or at its whole
/// training set when that is smaller. `sizes[t]` is task `t`'s training size.
fn check_quotas(ledger: &RunLedger, setting: Setting, capacity: u64, sizes: &[usize]) -> Result<usize, String> {
    let events = admits(ledger);
    for (t, quota, per_task) in &events {
        let t = *t as usize;
        // Sized for the next task n: the incremental setting splits over the
        // n - 1 tasks before it, pretraining also counts its first phase.
        let divisor = match setting {
            Setting::Incremental => (t + 2) - 1,
            Setting::Pretraining => t + 1,
        };
        let expected = (capacity / divisor as u64) as usize;
        if *quota != expected {
            return Err(format!("task {}: quota {quota}, expected {expected}", t + 1));
        }
        let ids: Vec<u32> = per_task.iter().map(|p| p.0).collect();
        if ids != (0..=t as u32).collect::<Vec<_>>() {
            return Err(format!("task {}: stored groups {ids:?}", t + 1));
        }
        for &(id, count) in per_task {
            let want = expected.min(sizes[id as usize]);
            if count != want {
                return Err(format!("task {}: group {id} holds {count}, expected {want}", t + 1));
            }
        }
    }
    Ok(events.len())
}

fn budget_violations(ledger: &RunLedger, budget: u64) -> usize {
    ledger.events.iter().filter(|e| e.buffer_bytes() > budget).count()
}

struct Runs {
    ten_cram: RunLedger,
    ten_drift: RunLedger,
    /// `(strategy, seed) -> ledger` on the default config.
    default: HashMap<(&'static str, u64), RunLedger>,
    pretraining: Vec<RunLedger>,
    comparison_time: Duration,
}

fn metrics(ledger: &RunLedger, config: &RunConfig) -> RunMetrics {
    cram_cli::output::metrics_for(config, ledger).unwrap()
}

fn default_config(strategy: &str, seed: u64, extra: &[&str]) -> RunConfig {
    let mut o = vec![format!("strategy={strategy}"), format!("seed={seed}")];
    o.extend(extra.iter().map(|s| s.to_string()));
    shipped("default.toml", &o)
}

fn execute_runs() -> Runs {
    let ten_cram = run(&ten_task_config("cram")).unwrap();
    let ten_drift = run(&ten_task_config("drift_free")).unwrap();
    let mut default = HashMap::new();
    let start = Instant::now();
    for s in ["cram", "stale_cv", "naive_sgd"] {
        for seed in SEEDS {
            default.insert((s, seed), run(&default_config(s, seed, &[])).unwrap());
        }
    }
    let comparison_time = start.elapsed();
    for seed in SEEDS {
        default.insert(("iid", seed), run(&default_config("iid", seed, &[])).unwrap());
        default.insert(("rgb_unbounded", seed), run(&default_config("rgb_buffer", seed, &["budget_bytes=\"unbounded\""])).unwrap());
        default.insert(("rgb_buffer", seed), run(&default_config("rgb_buffer", seed, &[])).unwrap());
    }
    let pretraining = SEEDS
        .iter()
        .map(|seed| run(&shipped("pretraining.toml", &[format!("seed={seed}")])).unwrap())
        .collect();
    Runs { ten_cram, ten_drift, default, pretraining, comparison_time }
}

fn c4_budget_safety(runs: &Runs) -> Verdict {
    let budget = ten_task_budget();
    let capacity = 45;
    let sizes = vec![20; 10];
    for (name, ledger) in [("cram", &runs.ten_cram), ("drift_free", &runs.ten_drift)] {
        let over = budget_violations(ledger, budget);
        if over > 0 {
            return Err(format!("{name}: {over} events over {budget} bytes"));
        }
    }
    let n = check_quotas(&runs.ten_cram, Setting::Incremental, capacity, &sizes)?;
    if n != 10 {
        return Err(format!("{n} admissions in a 10-task run"));
    }
    // The shipped default and pretraining runs obey the same rules.
    let default_budget = 122_880;
    let default_capacity = default_budget / (256 + CODE_METADATA_BYTES);
    for ((s, seed), ledger) in &runs.default {
        if *s != "rgb_unbounded" && budget_violations(ledger, default_budget) > 0 {
            return Err(format!("{s} seed {seed} exceeds the budget"));
        }
    }
    for seed in SEEDS {
        check_quotas(&runs.default[&("cram", seed)], Setting::Incremental, default_capacity, &[120; 5])
            .map_err(|e| format!("default cram seed {seed}: {e}"))?;
    }
    for (seed, ledger) in SEEDS.iter().zip(&runs.pretraining) {
        if budget_violations(ledger, default_budget) > 0 {
            return Err(format!("pretraining seed {seed} exceeds the budget"));
        }
        check_quotas(ledger, Setting::Pretraining, default_capacity, &[300, 150, 150])
            .map_err(|e| format!("pretraining seed {seed}: {e}"))?;
    }
    let last = admits(&runs.ten_cram).pop().unwrap();
    Ok(format!(
        "K={capacity}, quotas {:?} after task 10; every event within budget",
        last.2.iter().map(|p| p.1).collect::<Vec<_>>()
    ))
}

fn c5_model_memory(runs: &Runs) -> Verdict {
    let cram: Vec<u64> = runs.ten_cram.memory.iter().map(|m| m.model_bytes).collect();
    if cram[1..].iter().any(|&b| b != cram[1]) {
        return Err(format!("cram model bytes vary: {cram:?}"));
    }
    let snapshot = Compressor::new(ten_task_config("cram").codec(), 0).unwrap().snapshot_bytes();
    let drift: Vec<u64> = runs.ten_drift.memory.iter().map(|m| m.model_bytes).collect();
    for t in 1..drift.len() {
        if drift[t] - drift[t - 1] != snapshot {
            return Err(format!("drift_free grew by {} bytes at task {}, expected {snapshot}", drift[t] - drift[t - 1], t + 1));
        }
    }
    Ok(format!(
        "cram {} bytes from task 2 on; drift_free +{snapshot} per task ({} -> {})",
        cram[1],
        drift[0],
        drift[drift.len() - 1]
    ))
}

fn seed_metrics(runs: &Runs, strategy: &'static str) -> Vec<RunMetrics> {
    let config_strategy = match strategy {
        "rgb_unbounded" => "rgb_buffer",
        s => s,
    };
    SEEDS
        .iter()
        .map(|&seed| metrics(&runs.default[&(strategy, seed)], &default_config(config_strategy, seed, &[])))
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn evals(m: &[RunMetrics]) -> Vec<f64> {
    m.iter().map(|m| m.final_avg_eval_acc).collect()
}

fn c6_strategy_ordering(runs: &Runs) -> Verdict {
    let cram = seed_metrics(runs, "cram");
    let stale = seed_metrics(runs, "stale_cv");
    let sgd = seed_metrics(runs, "naive_sgd");
    let (a, b, c) = (evals(&cram), evals(&stale), evals(&sgd));
    let mut problems = Vec::new();
    for i in 0..SEEDS.len() {
        if a[i] - b[i] < 2.0 {
            problems.push(format!("seed {}: cram {} vs stale_cv {}", SEEDS[i], a[i], b[i]));
        }
        if b[i] - c[i] < 2.0 {
            problems.push(format!("seed {}: stale_cv {} vs naive_sgd {}", SEEDS[i], b[i], c[i]));
        }
    }
    let (ma, mb, mc) = (mean(a.clone()), mean(b.clone()), mean(c.clone()));
    if !(ma > mb && mb > mc) {
        problems.push(format!("means {ma:.2} / {mb:.2} / {mc:.2}"));
    }
    let f = |m: &[RunMetrics]| mean(m.iter().map(|m| m.avgf_max.unwrap()));
    let (fa, fb, fc) = (f(&cram), f(&stale), f(&sgd));
    if !(fa < fb && fb < fc) {
        problems.push(format!("AvgF {fa:.2} / {fb:.2} / {fc:.2}"));
    }
    if runs.comparison_time > Duration::from_secs(30 * 60) {
        problems.push(format!("runtime {:.0?}", runs.comparison_time));
    }
    let summary = format!(
        "eval cram {a:?} stale_cv {b:?} naive_sgd {c:?}; AvgF {fa:.1} < {fb:.1} < {fc:.1}; {:.0?}",
        runs.comparison_time
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}

fn c7_upper_bounds(runs: &Runs) -> Verdict {
    let cram = mean(evals(&seed_metrics(runs, "cram")));
    let iid = mean(evals(&seed_metrics(runs, "iid")));
    let rgb = mean(evals(&seed_metrics(runs, "rgb_unbounded")));
    let summary = format!("iid {iid:.2}, unbounded rgb {rgb:.2}, cram {cram:.2}");
    if iid >= cram && rgb >= cram {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Most samples the buffer held at once. The final admission sizes the
/// buffer for a task that never comes, so the last count understates it.
fn peak_entries(ledger: &RunLedger) -> usize {
    admits(ledger).iter().map(|a| a.2.iter().map(|p| p.1).sum()).max().unwrap_or(0)
}

fn c8_budget_equalized(runs: &Runs) -> Verdict {
    let config = default_config("rgb_buffer", 0, &[]);
    let report = compression_report(&config.codec()).unwrap();
    let train_clips = config.tasks * config.classes_per_task * config.data.clips_per_class_train;
    let cram = evals(&seed_metrics(runs, "cram"));
    let rgb = evals(&seed_metrics(runs, "rgb_buffer"));
    let mut problems = Vec::new();
    for (i, seed) in SEEDS.iter().enumerate() {
        if cram[i] - rgb[i] < 5.0 {
            problems.push(format!("seed {seed}: cram {} vs rgb_buffer {}", cram[i], rgb[i]));
        }
        let c = peak_entries(&runs.default[&("cram", *seed)]);
        let r = peak_entries(&runs.default[&("rgb_buffer", *seed)]);
        if r == 0 || r * 20 > train_clips {
            problems.push(format!("seed {seed}: raw buffer peaked at {r} of {train_clips} clips"));
        }
        if (c as f64) < (r as f64) * report.ratio / 2.0 {
            problems.push(format!("seed {seed}: {c} codes vs {r} clips"));
        }
    }
    let c = peak_entries(&runs.default[&("cram", 0)]);
    let r = peak_entries(&runs.default[&("rgb_buffer", 0)]);
    let summary = format!(
        "eval cram {cram:?} vs rgb_buffer {rgb:?}; peak {c} codes vs {r} of {train_clips} clips (need x{})",
        report.ratio / 2.0
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}

fn c9_pretraining(runs: &Runs) -> Verdict {
    let incremental = mean(evals(&seed_metrics(runs, "cram")));
    let pre: Vec<f64> = SEEDS
        .iter()
        .zip(&runs.pretraining)
        .map(|(seed, l)| metrics(l, &shipped("pretraining.toml", &[format!("seed={seed}")])).final_avg_eval_acc)
        .collect();
    let refreshes: usize = runs.pretraining.iter().map(refresh_count).sum();
    let incremental_cfg = default_config("cram", 0, &[]);
    let pre_cfg = shipped("pretraining.toml", &[]);
    let classes = |c: &RunConfig| c.pretrain_classes * usize::from(c.setting == Setting::Pretraining) + c.tasks * c.classes_per_task;
    if classes(&incremental_cfg) != classes(&pre_cfg) {
        return Err("class sets differ".into());
    }
    let summary = format!("pretraining {pre:?} (mean {:.2}) vs incremental {incremental:.2}; {refreshes} refreshes", mean(pre.clone()));
    if mean(pre) >= incremental && refreshes == 0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn c10_compression() -> Verdict {
    // 8x32x32 RGB clips at a byte per channel; a 4x8x8 grid of one-byte indices.
    let expected = [("default.toml", 8 * 32 * 32 * 3, 4 * 8 * 8), ("deep.toml", 16 * 32 * 32 * 3, 4 * 8 * 8)];
    let mut ratios = Vec::new();
    for (name, raw, code) in expected {
        let report = compression_report(&shipped(name, &[]).codec()).map_err(|e| e.to_string())?;
        if report.raw_clip_bytes != raw || report.code_bytes != code {
            return Err(format!("{name}: {report:?}, expected {raw}/{code}"));
        }
        if report.ratio != raw as f64 / code as f64 {
            return Err(format!("{name}: ratio {}", report.ratio));
        }
        ratios.push(report.ratio);
    }
    if ratios[1] / ratios[0] < 2.0 {
        return Err(format!("ratios {ratios:?} differ by less than 2x"));
    }
    Ok(format!("ratios {} and {}", ratios[0], ratios[1]))
}

fn c11_determinism(runs: &Runs) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = default_config("cram", 0, &[]);
    let rerun = run(&config).map_err(|e| e.to_string())?;
    write_run(&dir.path().join("a"), &config, &runs.default[&("cram", 0)]).map_err(|e| e.to_string())?;
    write_run(&dir.path().join("b"), &config, &rerun).map_err(|e| e.to_string())?;
    for f in [ACCURACY_FILE, METRICS_FILE] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok("accuracy_matrix.csv and metrics.json byte-identical on rerun".into())
}

/// Prints each verdict as soon as it is known. Lines go straight to the
/// stderr handle, which the test harness does not capture.
#[derive(Default)]
struct Report {
    failed: Vec<String>,
}

impl Report {
    fn record(&mut self, name: &str, verdict: Verdict) {
        match verdict {
            Ok(detail) => writeln!(std::io::stderr(), "PASS {name}: {detail}").unwrap(),
            Err(detail) => {
                writeln!(std::io::stderr(), "FAIL {name}: {detail}").unwrap();
                self.failed.push(name.to_owned());
            }
        }
    }
}

#[test]
fn acceptance() {
    let mut report = Report::default();
    report.record("1 gradient correctness", c1_gradients());
    report.record("2 vq oracle", c2_vq_oracle());
    report.record("3 forgetting oracle", c3_forgetting_oracle());
    let runs = execute_runs();
    report.record("4 budget safety", c4_budget_safety(&runs));
    report.record("5 model memory", c5_model_memory(&runs));
    report.record("6 strategy ordering", c6_strategy_ordering(&runs));
    report.record("7 upper bounds", c7_upper_bounds(&runs));
    report.record("8 budget-equalized advantage", c8_budget_equalized(&runs));
    report.record("9 pretraining", c9_pretraining(&runs));
    report.record("10 compression arithmetic", c10_compression());
    report.record("11 determinism", c11_determinism(&runs));
    assert!(report.failed.is_empty(), "failed: {}", report.failed.join(", "));
}
