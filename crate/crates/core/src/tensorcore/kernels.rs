//! Dense kernels: GEMM dispatch and im2col-based 3-D convolution.
//!
//! Activations are laid out `[N, C, D, H, W]`; weights `[C_out, C_in, kD, kH, kW]`.
//! A 2-D convolution is the `D = kD = 1` special case.

use crate::error::{CramError, Result};

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is logically
/// `[m, k]` and `b` is `[k, n]`; `*_t` marks operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the buffers asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape arithmetic for one convolution, seen from the forward (`x -> y`) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_size: [usize; 3],
    pub out_size: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Geometry of `conv(x, w)` with `x: [N, C_in, D, H, W]`, `w: [C_out, C_in, kD, kH, kW]`.
    pub fn forward(x_shape: &[usize], w_shape: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 || x_shape[1] != w_shape[1] {
            return Err(CramError::ShapeMismatch {
                op: "conv3d",
                left: x_shape.to_vec(),
                right: w_shape.to_vec(),
            });
        }
        if stride.contains(&0) {
            return Err(CramError::InvalidArgument("conv stride must be >= 1".into()));
        }
        let mut out_size = [0; 3];
        for a in 0..3 {
            let padded = x_shape[2 + a] + 2 * pad[a];
            let k = w_shape[2 + a];
            if padded < k {
                return Err(CramError::InvalidShape {
                    op: "conv3d",
                    detail: format!("kernel {w_shape:?} larger than padded input {x_shape:?}"),
                });
            }
            out_size[a] = (padded - k) / stride[a] + 1;
        }
        Ok(ConvGeom {
            batch: x_shape[0],
            in_ch: x_shape[1],
            out_ch: w_shape[0],
            in_size: [x_shape[2], x_shape[3], x_shape[4]],
            out_size,
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
        })
    }

    /// Geometry of `conv_transpose(x, w)` with `x: [N, C_x, ...]`, `w: [C_x, C_y, k...]`,
    /// expressed as the forward conv `y -> x` it is the adjoint of.
    pub fn transpose(x_shape: &[usize], w_shape: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 || x_shape[1] != w_shape[0] {
            return Err(CramError::ShapeMismatch {
                op: "conv_transpose3d",
                left: x_shape.to_vec(),
                right: w_shape.to_vec(),
            });
        }
        if stride.contains(&0) {
            return Err(CramError::InvalidArgument("conv stride must be >= 1".into()));
        }
        let mut y_size = [0; 3];
        for a in 0..3 {
            let full = (x_shape[2 + a] - 1) * stride[a] + w_shape[2 + a];
            if full <= 2 * pad[a] {
                return Err(CramError::InvalidShape {
                    op: "conv_transpose3d",
                    detail: format!("padding {pad:?} consumes output for input {x_shape:?}"),
                });
            }
            y_size[a] = full - 2 * pad[a];
        }
        let geom = ConvGeom {
            batch: x_shape[0],
            in_ch: w_shape[1],
            out_ch: w_shape[0],
            in_size: y_size,
            out_size: [x_shape[2], x_shape[3], x_shape[4]],
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            stride,
            pad,
        };
        // The forward conv of y must land exactly on x's extent.
        for a in 0..3 {
            let back = (geom.in_size[a] + 2 * pad[a] - geom.kernel[a]) / stride[a] + 1;
            if back != geom.out_size[a] {
                return Err(CramError::InvalidShape {
                    op: "conv_transpose3d",
                    detail: format!("axis {a} does not invert cleanly"),
                });
            }
        }
        Ok(geom)
    }

    pub fn in_volume(&self) -> usize {
        self.in_size.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.out_size.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel_volume()
    }

    pub fn x_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.in_size;
        vec![self.batch, self.in_ch, d, h, w]
    }

    pub fn y_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.out_size;
        vec![self.batch, self.out_ch, d, h, w]
    }
}

/// Walk every (patch row, batch, output position) with its input offset.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let [id, ih, iw] = g.in_size;
    let [od, oh, ow] = g.out_size;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let cols_n = g.batch * out_vol;
    for ci in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    for n in 0..g.batch {
                        let x_base = (n * g.in_ch + ci) * in_vol;
                        let col_base = row * cols_n + n * out_vol;
                        for z in 0..od {
                            let zi = (z * sd + a) as isize - pd as isize;
                            if zi < 0 || zi >= id as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let yi = (y * sh + b) as isize - ph as isize;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let x_row = x_base + (zi as usize * ih + yi as usize) * iw;
                                let col_row = col_base + (z * oh + y) * ow;
                                for x in 0..ow {
                                    let xi = (x * sw + c) as isize - pw as isize;
                                    if xi < 0 || xi >= iw as isize {
                                        continue;
                                    }
                                    f(col_row + x, x_row + xi as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * g.batch * g.out_volume()];
    for_each_tap(g, |col, xi| cols[col] = x[xi]);
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut x = vec![0.0; g.batch * g.in_ch * g.in_volume()];
    for_each_tap(g, |col, xi| x[xi] += cols[col]);
    x
}

/// `[C, N*P]` -> `[N, C, P]`
fn channel_major_to_batch_major(src: &[f64], ch: usize, batch: usize, vol: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..ch {
        for n in 0..batch {
            let s = c * batch * vol + n * vol;
            let d = (n * ch + c) * vol;
            out[d..d + vol].copy_from_slice(&src[s..s + vol]);
        }
    }
    out
}

/// `[N, C, P]` -> `[C, N*P]`
fn batch_major_to_channel_major(src: &[f64], ch: usize, batch: usize, vol: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for n in 0..batch {
        for c in 0..ch {
            let s = (n * ch + c) * vol;
            let d = c * batch * vol + n * vol;
            out[d..d + vol].copy_from_slice(&src[s..s + vol]);
        }
    }
    out
}

/// `y = conv(x, w)`, returned as `[N, C_out, out volume]`.
pub fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let np = g.batch * g.out_volume();
    let mut y = vec![0.0; g.out_ch * np];
    gemm(g.out_ch, g.patch_len(), np, w, false, &cols, false, &mut y, false);
    channel_major_to_batch_major(&y, g.out_ch, g.batch, g.out_volume())
}

/// `dx = conv^T(dy, w)`; also the forward pass of a transposed convolution.
pub fn conv_backward_input(dy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.batch * g.out_volume();
    let dy_cm = batch_major_to_channel_major(dy, g.out_ch, g.batch, g.out_volume());
    let mut dcols = vec![0.0; g.patch_len() * np];
    gemm(g.patch_len(), g.out_ch, np, w, true, &dy_cm, false, &mut dcols, false);
    col2im(&dcols, g)
}

/// `dw = dy ⋆ x`, shaped like the weight.
pub fn conv_backward_weight(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let np = g.batch * g.out_volume();
    let dy_cm = batch_major_to_channel_major(dy, g.out_ch, g.batch, g.out_volume());
    let mut dw = vec![0.0; g.out_ch * g.patch_len()];
    gemm(g.out_ch, np, g.patch_len(), &dy_cm, false, &cols, true, &mut dw, false);
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.out_ch * g.out_volume()];
        let [id, ih, iw] = g.in_size;
        let [od, oh, ow] = g.out_size;
        let [kd, kh, kw] = g.kernel;
        for n in 0..g.batch {
            for co in 0..g.out_ch {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.in_ch {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for c in 0..kw {
                                            let zi = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let yi = (yy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                            let xi = (xx * g.stride[2] + c) as isize - g.pad[2] as isize;
                                            if zi < 0
                                                || yi < 0
                                                || xi < 0
                                                || zi >= id as isize
                                                || yi >= ih as isize
                                                || xi >= iw as isize
                                            {
                                                continue;
                                            }
                                            let xv = x[(((n * g.in_ch + ci) * id + zi as usize) * ih + yi as usize) * iw
                                                + xi as usize];
                                            let wv = w[(((co * g.in_ch + ci) * kd + a) * kh + b) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[(((n * g.out_ch + co) * od + z) * oh + yy) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x_shape = [2, 3, 4, 6, 5];
        let w_shape = [4, 3, 2, 3, 3];
        let g = ConvGeom::forward(&x_shape, &w_shape, [2, 1, 2], [0, 1, 1]).unwrap();
        let x = ramp(x_shape.iter().product(), 0.1);
        let w = ramp(w_shape.iter().product(), 0.05);
        let fast = conv_forward(&x, &w, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_geometry_inverts_forward() {
        let g = ConvGeom::transpose(&[1, 16, 4, 8, 8], &[16, 3, 2, 4, 4], [2, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(g.x_shape(), vec![1, 3, 8, 16, 16]);
        assert_eq!(g.y_shape(), vec![1, 16, 4, 8, 8]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
