//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! at call time and stored with whatever the backward rule needs. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and sums
//! gradient contributions from every use site. Nodes that do not depend on a
//! `requires_grad` leaf never receive a gradient buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{self, matmul_dims, RhsLayout, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, layout: RhsLayout },
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Square(Var),
    Abs(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    L2Normalize { a: Var, divisors: Vec<f64>, eps: f64 },
    LayerNorm { x: Var, scale: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Mean { a: Var, axis: usize },
    Sum(Var),
    Dropout { a: Var, mask: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    SplitHeads(Var),
    MergeHeads(Var),
    Select { a: Var, index: usize },
    Stack(Vec<Var>),
    PairwiseAdd { a: Var, b: Var },
    SmoothedCe { probs: Var, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph with gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Probability floor applied inside the cross-entropy logarithm.
pub const CE_PROB_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// depends on a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Registers a leaf. Only leaves with `requires_grad` get gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, RhsLayout::Plain)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, RhsLayout::Transposed)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, layout: RhsLayout) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b), layout)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, layout }, rg))
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape
    /// (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.len() < sa.len() && sa.ends_with(sb) {
            true
        } else {
            return Err(Error::dim("add", sa, sb));
        };
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = va.clone();
        let n = vb.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vb.data()[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b, broadcast }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::fabs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (value, divisors) = tensor::l2_normalize_rows_with_norms(self.value(a), eps);
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize { a, divisors, eps }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (value, cache) =
            tensor::layer_norm_forward(self.value(x), self.value(scale), self.value(shift), eps)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
            rg,
        ))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = tensor::reduce_mean(self.value(a), axis)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean { a, axis }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(a).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose_last()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// `[N, D] -> [H, N, D/H]`; head `h` holds columns `h·d_h .. (h+1)·d_h`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let value = split_heads(self.value(a), heads)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SplitHeads(a), rg))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let value = merge_heads(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MergeHeads(a), rg))
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rank() < 1 || index >= src.shape()[0] {
            return Err(Error::dim("select", src.shape(), &[index]));
        }
        let inner: usize = src.shape()[1..].iter().product();
        let data = src.data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::new(&src.shape()[1..], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Select { a, index }, rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * parts.len());
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("stack", &shape, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        let value = Tensor::new(&out_shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Stack(parts.to_vec()), rg))
    }

    /// `out[i, j, :] = a[i, :] + b[j, :]` for `a: [N, F]`, `b: [M, F]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("pairwise_add", sa, sb));
        }
        let (n, m, f) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * m * f];
        for i in 0..n {
            for j in 0..m {
                let dst = &mut data[(i * m + j) * f..(i * m + j + 1) * f];
                let (ra, rb) = (&va[i * f..(i + 1) * f], &vb[j * f..(j + 1) * f]);
                for ((d, x), y) in dst.iter_mut().zip(ra).zip(rb) {
                    *d = x + y;
                }
            }
        }
        let value = Tensor::new(&[n, m, f], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::PairwiseAdd { a, b }, rg))
    }

    /// Mean label-smoothed cross-entropy of probability rows `[B, K]`
    /// against class indices in `0..K`.
    pub fn label_smoothed_ce(&mut self, probs: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape()[0] != targets.len() {
            return Err(Error::dim("label_smoothed_ce", p.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        let (b, k) = (p.shape()[0], p.shape()[1]);
        let mut weights = vec![smoothing / k as f64; b * k];
        for (row, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Label {
                    label: t,
                    classes: k,
                });
            }
            weights[row * k + t] += 1.0 - smoothing;
        }
        let mut loss = 0.0;
        for (w, &pv) in weights.iter().zip(p.data()) {
            if *w != 0.0 {
                loss -= w * libm::log(pv.max(CE_PROB_FLOOR));
            }
        }
        loss /= b as f64;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::SmoothedCe { probs, weights }, rg))
    }

    /// Propagates d(loss)/d(node) to every node that depends on a trainable
    /// leaf. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, layout } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (d, _) = matmul_dims(va, vb, *layout)?;
                let gd = g.data();
                if self.rg(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..d.batch {
                        let gg = &gd[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let bb = rhs_block(vb, &d, bi);
                        let dst = &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                        match layout {
                            // dA = dC · Bᵀ
                            RhsLayout::Plain => tensor::gemm_nt(gg, bb, dst, d.m, d.n, d.k),
                            // C = A·Bᵀ, dA = dC · B
                            RhsLayout::Transposed => tensor::gemm_nn(gg, bb, dst, d.m, d.n, d.k),
                        }
                    }
                    accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..d.batch {
                        let gg = &gd[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let aa = &va.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                        let off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                        let dst = &mut gb[off..off + d.k * d.n];
                        match layout {
                            // dB = Aᵀ · dC
                            RhsLayout::Plain => tensor::gemm_tn(aa, gg, dst, d.k, d.m, d.n),
                            // dB = dCᵀ · A
                            RhsLayout::Transposed => tensor::gemm_tn(gg, aa, dst, d.n, d.m, d.k),
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    if *broadcast {
                        let vb = self.value(*b);
                        let n = vb.len();
                        let mut gb = vec![0.0; n];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[i % n] += v;
                        }
                        accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
                    } else {
                        accumulate(grads, *b, g.clone());
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |d, y| d * y)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |d, x| d * x)?);
                }
            }
            Op::Scale { a, c } => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Square(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| 2.0 * x * d)?)
            }
            Op::Abs(a) => accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else if x < 0.0 { -d } else { 0.0 })?,
            ),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |d, y| d * (1.0 - y * y))?),
            Op::Gelu(a) => {
                accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d * tensor::gelu_grad(x))?)
            }
            Op::Softmax(a) => {
                let (rows, m) = out.rows_cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out.data()[r * m..(r + 1) * m];
                    let dy = &g.data()[r * m..(r + 1) * m];
                    let s = tensor::dot(y, dy);
                    for j in 0..m {
                        gx[r * m + j] = y[j] * (dy[j] - s);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), gx)?);
            }
            Op::L2Normalize { a, divisors, eps } => {
                let (rows, d) = out.rows_cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let dy = &g.data()[r * d..(r + 1) * d];
                    let div = divisors[r];
                    // Inside the eps ball the divisor is constant.
                    let proj = if div > *eps { tensor::dot(y, dy) } else { 0.0 };
                    for j in 0..d {
                        gx[r * d + j] = (dy[j] - y[j] * proj) / div;
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = out.len() / d;
                let sc = self.value(*scale).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let dy = &g.data()[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = dy[j] * sc[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = dy[j] * sc[j];
                            gx[r * d + j] = k * (d as f64 * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape(), gx)?);
                }
                if self.rg(*scale) || self.rg(*shift) {
                    let mut gs = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let dy = g.data()[r * d + j];
                            gs[j] += dy * xhat[r * d + j];
                            gb[j] += dy;
                        }
                    }
                    if self.rg(*scale) {
                        accumulate(grads, *scale, Tensor::new(&[d], gs)?);
                    }
                    if self.rg(*shift) {
                        accumulate(grads, *shift, Tensor::new(&[d], gb)?);
                    }
                }
            }
            Op::Mean { a, axis } => {
                let va = self.value(*a);
                let (outer, len, inner) = tensor::axis_split(va.shape(), *axis);
                let inv = 1.0 / len as f64;
                let mut gx = vec![0.0; va.len()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv = sv * inv;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(va.shape(), gx)?);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, Tensor::full(va.shape(), g.item()));
            }
            Op::Dropout { a, mask } => {
                let mut gx = g.clone();
                for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                accumulate(grads, *a, gx);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(self.shape(*a))?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose_last()?),
            Op::SplitHeads(a) => accumulate(grads, *a, merge_heads(g)?),
            Op::MergeHeads(a) => {
                let heads = self.shape(*a)[0];
                accumulate(grads, *a, split_heads(g, heads)?);
            }
            Op::Select { a, index } => {
                let va = self.value(*a);
                let inner = g.len();
                let mut gx = vec![0.0; va.len()];
                gx[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::new(va.shape(), gx)?);
            }
            Op::Stack(parts) => {
                let inner = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if self.rg(p) {
                        let data = g.data()[i * inner..(i + 1) * inner].to_vec();
                        accumulate(grads, p, Tensor::new(self.shape(p), data)?);
                    }
                }
            }
            Op::PairwiseAdd { a, b } => {
                let (n, m, f) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let mut ga = vec![0.0; n * f];
                let mut gb = vec![0.0; m * f];
                for i in 0..n {
                    for j in 0..m {
                        let src = &g.data()[(i * m + j) * f..(i * m + j + 1) * f];
                        for (t, &v) in src.iter().enumerate() {
                            ga[i * f + t] += v;
                            gb[j * f + t] += v;
                        }
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(&[n, f], ga)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new(&[m, f], gb)?);
                }
            }
            Op::SmoothedCe { probs, weights } => {
                let p = self.value(*probs);
                let b = p.shape()[0] as f64;
                let scale = g.item() / b;
                let data = p
                    .data()
                    .iter()
                    .zip(weights)
                    .map(|(&pv, &w)| if pv > CE_PROB_FLOOR { -scale * w / pv } else { 0.0 })
                    .collect();
                accumulate(grads, *probs, Tensor::new(p.shape(), data)?);
            }
        }
        Ok(())
    }
}

fn rhs_block<'a>(b: &'a Tensor, d: &tensor::MatmulDims, bi: usize) -> &'a [f64] {
    if d.shared_rhs {
        b.data()
    } else {
        &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!(
            "dropout rate {rate} outside [0, 1)"
        )))
    }
}

/// `[N, D] -> [H, N, D/H]`.
pub fn split_heads(m: &Tensor, heads: usize) -> Result<Tensor> {
    if m.rank() != 2 {
        return Err(Error::dim("split_heads", m.shape(), &[heads]));
    }
    let (n, d) = (m.shape()[0], m.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!(
            "model dimension {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            out[(h * n + i) * dh..(h * n + i + 1) * dh]
                .copy_from_slice(&m.data()[i * d + h * dh..i * d + (h + 1) * dh]);
        }
    }
    Tensor::new(&[heads, n, dh], out)
}

/// `[H, N, d_h] -> [N, H·d_h]`, concatenating heads in order.
pub fn merge_heads(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::dim("merge_heads", t.shape(), &[]));
    }
    let (heads, n, dh) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = heads * dh;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh]
                .copy_from_slice(&t.data()[(h * n + i) * dh..(h * n + i + 1) * dh]);
        }
    }
    Tensor::new(&[n, d], out)
}
