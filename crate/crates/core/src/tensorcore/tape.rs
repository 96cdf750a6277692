//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse and returns a [`Gradients`] table. Shapes must match exactly:
//! there is no broadcasting, only explicit reshape / permute / bias-add.

use super::kernels::{self, ConvGeom};
use super::tensor::{inverse_permutation, permute_data, Tensor};
use crate::error::{CramError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Negative inputs scaled by the slope; plain relu at slope 0.
    LeakyRelu(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    BiasAdd(Var, Var, usize),
    Conv(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom),
    /// logits, labels, row-wise softmax probabilities
    SoftmaxCrossEntropy(Var, Vec<usize>, Vec<f64>),
    Mse(Var, Var),
    /// Value of the quantized input, gradient routed to the continuous one.
    PassThrough(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every parameter leaf reached.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_deref().map(|g| (p, g)))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> CramError {
    CramError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: impl IntoIterator<Item = f64>) {
    match slot {
        Some(g) => {
            for (a, c) in g.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution.into_iter().collect()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free variable that receives gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaf(&mut self, value: Tensor, index: usize) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// `x` where positive, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect(),
        )
        .expect("shape preserved");
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.shape().len()];
        if perm.len() != t.shape().len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CramError::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of the axes of {:?}", t.shape()),
            });
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(CramError::InvalidShape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let (data, shape) = permute_data(t.data(), t.shape(), &[1, 0]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over the last axis: `[.., L] -> [..]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if shape.len() < 2 {
            return Err(CramError::InvalidShape {
                op: "mean_last",
                detail: format!("need rank >= 2, got {shape:?}"),
            });
        }
        let l = *shape.last().unwrap();
        let data = t.data().chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::MeanLast(a), &[a]))
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let shape = tx.shape();
        if axis >= shape.len() || tb.len() != shape[axis] {
            return Err(mismatch("bias_add", tx, tb));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let ch = shape[axis];
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % ch])
            .collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::BiasAdd(x, bias, axis), &[x, bias]))
    }

    /// 3-D convolution, `x: [N, C_in, D, H, W]`, `w: [C_out, C_in, kD, kH, kW]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = ConvGeom::forward(tx.shape(), tw.shape(), stride, pad)?;
        let out = kernels::conv_forward(tx.data(), tw.data(), &geom);
        let value = Tensor::new(geom.y_shape(), out)?;
        Ok(self.push(value, Op::Conv(x, w, geom), &[x, w]))
    }

    /// Adjoint of [`Tape::conv3d`], `x: [N, C_x, ...]`, `w: [C_x, C_y, kD, kH, kW]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geom = ConvGeom::transpose(tx.shape(), tw.shape(), stride, pad)?;
        let out = kernels::conv_backward_input(tx.data(), tw.data(), &geom);
        let value = Tensor::new(geom.x_shape(), out)?;
        Ok(self.push(value, Op::ConvTranspose(x, w, geom), &[x, w]))
    }

    /// 2-D convolution, `x: [N, C_in, H, W]`, `w: [C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(CramError::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        let x5 = self.reshape(x, &[sx[0], sx[1], 1, sx[2], sx[3]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y5 = self.conv3d(x5, w5, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        let s = self.shape(y5).to_vec();
        self.reshape(y5, &[s[0], s[1], s[3], s[4]])
    }

    /// Mean over rows of `-log softmax(logits)[label]`; `logits: [N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let shape = t.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(CramError::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("logits {shape:?} vs {} labels", labels.len()),
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(CramError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            loss += z.ln() + max - row[y];
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(value, Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs), &[logits]))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / ta.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Forward value of `quantized`, backward identity into `continuous`.
    pub fn pass_through(&mut self, continuous: Var, quantized: Var) -> Result<Var> {
        let (tc, tq) = (self.value(continuous), self.value(quantized));
        if tc.shape() != tq.shape() {
            return Err(mismatch("pass_through", tc, tq));
        }
        let value = tq.clone();
        Ok(self.push(value, Op::PassThrough(continuous), &[continuous]))
    }

    /// Row lookup: `table: [R, d]`, result `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(CramError::InvalidShape {
                op: "gather_rows",
                detail: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CramError::InvalidArgument(format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(CramError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| node.param.map(|p| (p, i)))
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let rg = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], g.iter().copied());
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], g.iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], g.iter().copied());
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let bv = val(b).data();
                        accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(x, y)| x * y));
                    }
                    if rg(b) {
                        let av = val(a).data();
                        accumulate(&mut grads[b.0], g.iter().zip(av).map(|(x, y)| x * y));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.iter().map(|x| x * c)),
                Op::LeakyRelu(a, slope) => {
                    let av = val(a).data();
                    accumulate(
                        &mut grads[a.0],
                        g.iter().zip(av).map(|(&x, &y)| if y > 0.0 { x } else { slope * x }),
                    );
                }
                Op::Reshape(a) | Op::PassThrough(a) => accumulate(&mut grads[a.0], g.iter().copied()),
                Op::Permute(a, perm) => {
                    let (back, _) = permute_data(&g, node.value.shape(), &inverse_permutation(perm));
                    accumulate(&mut grads[a.0], back);
                }
                Op::Transpose(a) => {
                    let (back, _) = permute_data(&g, node.value.shape(), &[1, 0]);
                    accumulate(&mut grads[a.0], back);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (val(a).shape(), val(b).shape());
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if rg(a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, nn, k, &g, false, val(b).data(), true, &mut ga, false);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if rg(b) {
                        let mut gb = vec![0.0; k * nn];
                        kernels::gemm(k, m, nn, val(a).data(), true, &g, false, &mut gb, false);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Sum(a) => {
                    let len = val(a).len();
                    accumulate(&mut grads[a.0], std::iter::repeat_n(g[0], len));
                }
                Op::Mean(a) => {
                    let len = val(a).len();
                    accumulate(&mut grads[a.0], std::iter::repeat_n(g[0] / len as f64, len));
                }
                Op::MeanLast(a) => {
                    let l = *val(a).shape().last().unwrap();
                    let spread = g.iter().flat_map(|&x| std::iter::repeat_n(x / l as f64, l));
                    accumulate(&mut grads[a.0], spread.collect::<Vec<_>>());
                }
                Op::BiasAdd(x, b, axis) => {
                    let shape = node.value.shape();
                    if rg(x) {
                        accumulate(&mut grads[x.0], g.iter().copied());
                    }
                    if rg(b) {
                        let inner: usize = shape[axis + 1..].iter().product();
                        let ch = shape[*axis];
                        let mut gb = vec![0.0; ch];
                        for (i, &v) in g.iter().enumerate() {
                            gb[(i / inner) % ch] += v;
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Conv(x, w, geom) => {
                    if rg(x) {
                        accumulate(&mut grads[x.0], kernels::conv_backward_input(&g, val(w).data(), geom));
                    }
                    if rg(w) {
                        accumulate(&mut grads[w.0], kernels::conv_backward_weight(val(x).data(), &g, geom));
                    }
                }
                Op::ConvTranspose(x, w, geom) => {
                    if rg(x) {
                        accumulate(&mut grads[x.0], kernels::conv_forward(&g, val(w).data(), geom));
                    }
                    if rg(w) {
                        accumulate(&mut grads[w.0], kernels::conv_backward_weight(&g, val(x).data(), geom));
                    }
                }
                Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                    let k = val(logits).shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        gl[r * k + y] -= scale;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (val(a).data(), val(b).data());
                    let c = 2.0 * g[0] / av.len() as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| c * (x - y)).collect();
                    if rg(b) {
                        accumulate(&mut grads[b.0], diff.iter().map(|d| -d));
                    }
                    if rg(a) {
                        accumulate(&mut grads[a.0], diff);
                    }
                }
                Op::GatherRows(table, indices) => {
                    let d = val(table).shape()[1];
                    let mut gt = vec![0.0; val(table).len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, src) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
            }
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, params })
    }
}
