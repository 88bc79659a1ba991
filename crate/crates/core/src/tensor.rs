//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape) holds one scalar. Every extent is at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", shape, &[]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element at a full multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        self.data[off]
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (m * n);
        let mut out = vec![0.0; self.len()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self::new(&shape, out)
    }

    /// Row-major 2-D view dimensions `(rows, cols)` over the last axis.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let d = self.last_dim();
        (self.len() / d, d)
    }
}

/// How the right operand of a matrix product is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RhsLayout {
    /// `b` is `[.., k, n]`.
    Plain,
    /// `b` is `[.., n, k]` and is used transposed.
    Transposed,
}

/// Batched matrix product geometry shared by the forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand has no batch axes and is reused for every batch entry.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor, layout: RhsLayout) -> Result<(MatmulDims, Vec<usize>)> {
    let err = || Error::dim("matmul", a.shape(), b.shape());
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape[ar - 2], a.shape[ar - 1]);
    let (bk, n) = match layout {
        RhsLayout::Plain => (b.shape[br - 2], b.shape[br - 1]),
        RhsLayout::Transposed => (b.shape[br - 1], b.shape[br - 2]),
    };
    if bk != k {
        return Err(err());
    }
    let a_batch = &a.shape[..ar - 2];
    let b_batch = &b.shape[..br - 2];
    let shared_rhs = b_batch.is_empty();
    if !shared_rhs && a_batch != b_batch {
        return Err(err());
    }
    let batch = a_batch.iter().product();
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Matrix product with optional transposed right operand and batch broadcasting.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, layout: RhsLayout) -> Result<Tensor> {
    let (d, shape) = matmul_dims(a, b, layout)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let aa = &a.data[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bb = if d.shared_rhs {
            &b.data[..]
        } else {
            &b.data[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        let cc = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        match layout {
            RhsLayout::Plain => gemm_nn(aa, bb, cc, d.m, d.k, d.n),
            RhsLayout::Transposed => gemm_nt(aa, bb, cc, d.m, d.k, d.n),
        }
    }
    Tensor::new(&shape, out)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op: "softmax_rows",
            detail: "NaN in input".into(),
        });
    }
    let (rows, m) = x.rows_cols();
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * m..(r + 1) * m];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(&x.shape, out)
}

/// Divides every last-axis row by `max(‖row‖₂, eps)`. Returns the output and
/// the per-row divisors.
pub(crate) fn l2_normalize_rows_with_norms(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, d) = x.rows_cols();
    let mut out = x.data.clone();
    let mut divs = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out[r * d..(r + 1) * d];
        let n = libm::sqrt(dot(row, row));
        let div = if n >= eps { n } else { eps };
        for v in row.iter_mut() {
            *v /= div;
        }
        divs.push(div);
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        divs,
    )
}

pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    l2_normalize_rows_with_norms(x, eps).0
}

/// Normalized activations and reciprocal standard deviations from layer norm.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if scale.shape() != [d] || shift.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), scale.shape()));
    }
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * scale.data[j] + shift.data[j];
        }
        inv_std.push(is);
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormCache { xhat, inv_std },
    ))
}

pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, scale, shift, eps).map(|(t, _)| t)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Mean along `axis`, removing that axis.
pub fn reduce_mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("reduce_mean", x.shape(), &[axis]));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let inv = 1.0 / len as f64;
    for v in &mut out {
        *v *= inv;
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

/// `(product of extents before axis, extent, product after axis)`
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Plain triple-loop product used as an oracle in tests.
#[cfg(test)]
pub(crate) fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}
