//! Nearest-codeword quantization and the VQ-VAE codebook/commitment loss.

use crate::error::{CramError, Result};
use crate::tensorcore::{Tape, Var};

/// Index of the nearest row of `codebook` (`[K, d]`, row-major) to each
/// `d`-dim vector in `latents`, by exact squared L2 distance. Ties resolve
/// to the lowest index.
pub fn nearest_codewords(latents: &[f64], codebook: &[f64], dim: usize) -> Vec<usize> {
    latents
        .chunks(dim)
        .map(|z| {
            let mut best = (f64::INFINITY, 0);
            for (k, e) in codebook.chunks(dim).enumerate() {
                let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Output of [`vq_loss`].
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Quantized latents, differentiable into the encoder output by pass-through.
    pub quantized: Var,
    /// `||sg(z) - e||^2 + beta * ||z - sg(e)||^2` (means over elements).
    pub loss: Var,
    pub indices: Vec<usize>,
}

/// Quantize `latents: [M, d]` against `codebook: [K, d]`.
pub fn vq_loss(tape: &mut Tape, latents: Var, codebook: Var, beta: f64) -> Result<Quantized> {
    let (ls, cs) = (tape.shape(latents).to_vec(), tape.shape(codebook).to_vec());
    if ls.len() != 2 || cs.len() != 2 || ls[1] != cs[1] {
        return Err(CramError::ShapeMismatch {
            op: "vq_loss",
            left: ls,
            right: cs,
        });
    }
    let indices = nearest_codewords(tape.value(latents).data(), tape.value(codebook).data(), ls[1]);
    let e = tape.gather_rows(codebook, &indices)?;
    let z_sg = tape.detach(latents);
    let e_sg = tape.detach(e);
    let codebook_term = tape.mse(z_sg, e)?;
    let commitment = tape.mse(latents, e_sg)?;
    let commitment = tape.scale(commitment, beta);
    let loss = tape.add(codebook_term, commitment)?;
    let quantized = tape.pass_through(latents, e)?;
    Ok(Quantized {
        quantized,
        loss,
        indices,
    })
}
