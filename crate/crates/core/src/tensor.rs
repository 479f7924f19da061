//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Boundary handling for time-axis convolutions and moving averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Out-of-range rows repeat the nearest edge row.
    Replicate,
    /// Out-of-range rows are zero.
    Zero,
}

/// Aggregation used when halving the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Min,
    Max,
    /// Root mean square of the pooled entries.
    L2,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Min, Pooling::Max, Pooling::Avg, Pooling::L2];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Avg => "avg",
            Pooling::Min => "min",
            Pooling::Max => "max",
            Pooling::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "mean" => Some(Pooling::Avg),
            "min" => Some(Pooling::Min),
            "max" => Some(Pooling::Max),
            "l2" => Some(Pooling::L2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("holds {} values, expected {n}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Constructor for callers that already guarantee `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::dim("from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a matrix; a vector is treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape {
                shape: s.to_vec(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let n = self.cols();
        self.data[i * n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_same(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if bias.len() != n {
            return Err(Error::dim("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || self.ndim() != 2 || other.ndim() != 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    /// Softmax along `axis` of a matrix (a vector is a single row, axis 0 or 1 both
    /// normalise it as a whole).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        match (self.ndim(), axis) {
            (1, 0) | (1, 1) | (2, 1) => {
                let (m, n) = self.dims2()?;
                let mut out = self.data.clone();
                for i in 0..m {
                    softmax_in_place(&mut out[i * n..(i + 1) * n], n);
                }
                out_finite(Tensor::from_parts(self.shape.clone(), out), "softmax")
            }
            (2, 0) => self.transpose()?.softmax(1)?.transpose(),
            _ => Err(Error::Shape {
                shape: self.shape.clone(),
                reason: format!("softmax axis {axis} out of range"),
            }),
        }
    }

    /// Row-wise layer normalisation followed by the affine `gamma * x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_forward(self, gamma, beta, eps)?.0)
    }

    /// Length-preserving cross-correlation along the time (row) axis.
    ///
    /// `self` is `T×C_in`, `kernels` is `C_out×C_in×k` with odd `k`; the result is `T×C_out`.
    pub fn conv1d(&self, kernels: &Tensor, padding: Padding) -> Result<Tensor> {
        let (t_len, c_in) = self.dims2()?;
        let (c_out, k) = conv_dims(kernels, c_in)?;
        let half = (k / 2) as isize;
        let mut out = vec![0.0; t_len * c_out];
        let kd = kernels.data();
        for t in 0..t_len {
            for j in 0..k {
                let Some(src) = pad_index(t as isize + j as isize - half, t_len, padding) else {
                    continue;
                };
                let xrow = &self.data[src * c_in..(src + 1) * c_in];
                for o in 0..c_out {
                    let mut acc = 0.0;
                    for (c, &xv) in xrow.iter().enumerate() {
                        acc += kd[(o * c_in + c) * k + j] * xv;
                    }
                    out[t * c_out + o] += acc;
                }
            }
        }
        out_finite(Tensor::from_parts(vec![t_len, c_out], out), "conv1d")
    }

    /// Centered moving average over `k` rows (odd `k`) with replicate padding.
    pub fn moving_average(&self, k: usize) -> Result<Tensor> {
        check_odd_kernel(k)?;
        let (t_len, c) = self.dims2()?;
        let half = (k / 2) as isize;
        let mut out = vec![0.0; t_len * c];
        let inv = 1.0 / k as f64;
        for t in 0..t_len {
            let orow = &mut out[t * c..(t + 1) * c];
            for j in -half..=half {
                let src = clamp_index(t as isize + j, t_len);
                for (o, &x) in orow.iter_mut().zip(&self.data[src * c..(src + 1) * c]) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        Ok(Tensor::from_parts(vec![t_len, c], out))
    }

    /// Halves the time axis with window 2, stride 2; an odd tail row is pooled alone.
    pub fn pool_time(&self, pooling: Pooling) -> Result<Tensor> {
        let (t_len, c) = self.dims2()?;
        let out_len = t_len.div_ceil(2);
        let mut out = vec![0.0; out_len * c];
        for i in 0..out_len {
            let a = &self.data[2 * i * c..(2 * i + 1) * c];
            let b = (2 * i + 1 < t_len).then(|| &self.data[(2 * i + 1) * c..(2 * i + 2) * c]);
            for ch in 0..c {
                out[i * c + ch] = match b {
                    Some(b) => pool_pair(pooling, a[ch], b[ch]),
                    None => pool_single(pooling, a[ch]),
                };
            }
        }
        Ok(Tensor::from_parts(vec![out_len, c], out))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > m {
            return Err(Error::Index {
                what: "slice_rows".into(),
                index: start + len,
                size: m,
            });
        }
        Ok(Tensor::from_parts(
            vec![len, n],
            self.data[start * n..(start + len) * n].to_vec(),
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "slice_cols".into(),
                index: start + len,
                size: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Ok(Tensor::from_parts(vec![m, len], out))
    }

    /// Selects rows `0, stride, 2·stride, …`.
    pub fn subsample_rows(&self, stride: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let stride = stride.max(1);
        let mut out = Vec::with_capacity(m.div_ceil(stride) * n);
        for i in (0..m).step_by(stride) {
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor::from_parts(vec![m.div_ceil(stride), n], out))
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let n = first.cols();
        let mut m = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::dim("concat_rows", first.shape(), p.shape()));
            }
            m += pm;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![m, n], data))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let m = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::dim("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_parts(vec![m, n], data))
    }

    /// Row lookup: `out[r] = self[ids[r]]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if ids.is_empty() {
            return Err(Error::Shape {
                shape: vec![0, n],
                reason: "gather of zero rows".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Index {
                    what: "embedding table".into(),
                    index: id,
                    size: m,
                });
            }
            data.extend_from_slice(&self.data[id * n..(id + 1) * n]);
        }
        Ok(Tensor::from_parts(vec![ids.len(), n], data))
    }
}

const NARROW: usize = 16;

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Narrow outputs make the row-update loop too short; use dot products instead.
    if n < NARROW && k >= NARROW {
        let bt = transposed(b, k, n);
        matmul_nt_into(a, &bt, out, m, k, n);
        return;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators (fixed summation order).
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    if n < NARROW && k >= NARROW {
        let (at, bt) = (transposed(a, k, m), transposed(b, k, n));
        matmul_nt_into(&at, &bt, out, m, k, n);
        return;
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Max-subtracted softmax over the first `valid` entries; the rest are set to zero.
pub(crate) fn softmax_in_place(row: &mut [f64], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= total;
    }
    for v in row[valid..].iter_mut() {
        *v = 0.0;
    }
}

/// Returns `(output, x̂, 1/σ per row)`.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let (m, n) = x.dims2()?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    x.check_finite("layer_norm input")?;
    let mut xhat = vec![0.0; m * n];
    let mut rstd = vec![0.0; m];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..n {
            let h = (row[j] - mean) * r;
            xhat[i * n + j] = h;
            out[i * n + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd))
}

pub(crate) fn conv_dims(kernels: &Tensor, c_in: usize) -> Result<(usize, usize)> {
    match kernels.shape() {
        [c_out, kc, k] if *kc == c_in => {
            check_odd_kernel(*k)?;
            Ok((*c_out, *k))
        }
        s => Err(Error::dim("conv1d", s, &[usize::MAX, c_in, usize::MAX])),
    }
}

pub(crate) fn check_odd_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        Err(Error::Config(format!("kernel width must be odd, got {k}")))
    } else {
        Ok(())
    }
}

pub(crate) fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

pub(crate) fn pad_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Replicate => Some(clamp_index(i, len)),
        Padding::Zero => (i >= 0 && (i as usize) < len).then_some(i as usize),
    }
}

pub(crate) fn pool_pair(pooling: Pooling, a: f64, b: f64) -> f64 {
    match pooling {
        Pooling::Avg => 0.5 * (a + b),
        Pooling::Min => a.min(b),
        Pooling::Max => a.max(b),
        Pooling::L2 => (0.5 * (a * a + b * b)).sqrt(),
    }
}

pub(crate) fn pool_single(pooling: Pooling, a: f64) -> f64 {
    match pooling {
        Pooling::L2 => a.abs(),
        _ => a,
    }
}

fn out_finite(t: Tensor, what: &str) -> Result<Tensor> {
    t.check_finite(what)?;
    Ok(t)
}
