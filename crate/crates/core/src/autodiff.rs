//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node whose parents
//! always precede it, so node order is a topological order. [`Tape::backward`]
//! walks the nodes once in reverse and only propagates into nodes that require a
//! gradient; frozen parameters are constants from the tape's point of view.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{
    clamp_index, conv_dims, gelu_derivative, layer_norm_forward, matmul_nt_into, matmul_tn_into,
    pad_index, softmax_in_place, Padding, Pooling, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<String>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        padding: Padding,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Pool(Var, Pooling),
    MovingAverage(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    /// Gradients of trainable parameters reached by the pass, keyed by name.
    pub params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a named parameter. Frozen parameters never require a gradient.
    /// Registering the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let v = self.push_shared(
            Arc::clone(&p.value),
            Op::Leaf {
                param: Some(name.to_string()),
            },
            !p.frozen,
        );
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Unnamed leaf; with `requires_grad` its gradient is reported via [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax along `axis` of a matrix.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.masked_softmax(a, false),
            0 => {
                let t = self.transpose(a)?;
                let s = self.masked_softmax(t, false)?;
                self.transpose(s)
            }
            _ => Err(Error::Shape {
                shape: self.shape(a).to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            }),
        }
    }

    /// Row softmax; with `causal`, entry `(i, j)` for `j > i` is excluded (probability 0).
    pub fn masked_softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        x.check_finite("softmax input")?;
        let (m, n) = x.dims2()?;
        let mut out = x.data().to_vec();
        for i in 0..m {
            let valid = if causal { (i + 1).min(n) } else { n };
            softmax_in_place(&mut out[i * n..(i + 1) * n], valid);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn conv1d(&mut self, x: Var, kernels: Var, padding: Padding) -> Result<Var> {
        let out = self.value(x).conv1d(self.value(kernels), padding)?;
        let rg = self.any_grad(&[x, kernels]);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernels,
                padding,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn pool_time(&mut self, a: Var, pooling: Pooling) -> Result<Var> {
        let out = self.value(a).pool_time(pooling)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Pool(a, pooling), rg))
    }

    pub fn moving_average(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = self.value(a).moving_average(k)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MovingAverage(a, k), rg))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Gradients of `L = Σ seed ⊙ output` with respect to every node requiring one.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if seed.shape() != out_shape {
            return Err(Error::dim("backward seed", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads[i] {
                    params.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if wants(b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, bias) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(bias) {
                    let (m, n) = g.dims2()?;
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (o, v) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    accumulate(grads, *bias, Tensor::from_parts(shape, gb));
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::Gelu(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| gv * gelu_derivative(xv))
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
                }
            }
            Op::Softmax(a) => {
                if wants(a) {
                    let p = &node.value;
                    let (m, n) = p.dims2()?;
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let pr = &p.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(p.shape().to_vec(), gx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.dims2()?;
                let gam = self.value(*gamma).data();
                if wants(x) {
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[r * n + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    accumulate(grads, *x, Tensor::from_parts(shape, gx));
                }
                if wants(gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g.data()[r * n + j] * xhat[r * n + j];
                        }
                    }
                    let shape = self.shape(*gamma).to_vec();
                    accumulate(grads, *gamma, Tensor::from_parts(shape, gg));
                }
                if wants(beta) {
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    let shape = self.shape(*beta).to_vec();
                    accumulate(grads, *beta, Tensor::from_parts(shape, gb));
                }
            }
            Op::Conv1d {
                x,
                kernels,
                padding,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernels);
                let (t_len, c_in) = xv.dims2()?;
                let (c_out, k) = conv_dims(kv, c_in)?;
                let half = (k / 2) as isize;
                let mut gx = wants(x).then(|| vec![0.0; t_len * c_in]);
                let mut gk = wants(kernels).then(|| vec![0.0; c_out * c_in * k]);
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = pad_index(t as isize + j as isize - half, t_len, *padding)
                        else {
                            continue;
                        };
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                let ki = (o * c_in + c) * k + j;
                                if let Some(gx) = gx.as_mut() {
                                    gx[src * c_in + c] += gv * kv.data()[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += gv * xv.data()[src * c_in + c];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernels, Tensor::from_parts(kv.shape().to_vec(), gk));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let gt = g.transpose()?.reshape(self.shape(*a))?;
                    accumulate(grads, *a, gt);
                }
            }
            Op::SliceRows(a, start) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    let n = shape[shape.len() - 1];
                    let mut ga = vec![0.0; shape.iter().product()];
                    ga[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(grads, *a, Tensor::from_parts(shape, ga));
                }
            }
            Op::SliceCols(a, start) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    let (m, n) = self.value(*a).dims2()?;
                    let w = g.cols();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(grads, *a, Tensor::from_parts(shape, ga));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        let shape = self.shape(*p).to_vec();
                        let data = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, *p, Tensor::from_parts(shape, data));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        let shape = self.shape(*p).to_vec();
                        accumulate(grads, *p, Tensor::from_parts(shape, data));
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    accumulate(grads, *a, g.reshape(self.shape(*a))?);
                }
            }
            Op::Pool(a, pooling) => {
                if wants(a) {
                    let xv = self.value(*a);
                    let (t_len, c) = xv.dims2()?;
                    let x = xv.data();
                    let y = node.value.data();
                    let mut ga = vec![0.0; t_len * c];
                    for i in 0..t_len.div_ceil(2) {
                        for ch in 0..c {
                            let gv = g.data()[i * c + ch];
                            let ia = 2 * i * c + ch;
                            if 2 * i + 1 < t_len {
                                let ib = ia + c;
                                let (da, db) =
                                    pool_pair_grad(*pooling, x[ia], x[ib], y[i * c + ch]);
                                ga[ia] += gv * da;
                                ga[ib] += gv * db;
                            } else {
                                ga[ia] += gv * pool_single_grad(*pooling, x[ia]);
                            }
                        }
                    }
                    accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), ga));
                }
            }
            Op::MovingAverage(a, k) => {
                if wants(a) {
                    let (t_len, c) = g.dims2()?;
                    let half = (*k / 2) as isize;
                    let inv = 1.0 / *k as f64;
                    let mut ga = vec![0.0; t_len * c];
                    for t in 0..t_len {
                        for j in -half..=half {
                            let src = clamp_index(t as isize + j, t_len);
                            for ch in 0..c {
                                ga[src * c + ch] += inv * g.data()[t * c + ch];
                            }
                        }
                    }
                    let shape = self.shape(*a).to_vec();
                    accumulate(grads, *a, Tensor::from_parts(shape, ga));
                }
            }
            Op::Gather(table, ids) => {
                if wants(table) {
                    let shape = self.shape(*table).to_vec();
                    let n = g.cols();
                    let mut gt = vec![0.0; shape.iter().product()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += g.data()[r * n + j];
                        }
                    }
                    accumulate(grads, *table, Tensor::from_parts(shape, gt));
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = self.value(*a).len() as f64;
                    accumulate(grads, *a, Tensor::full(self.shape(*a), g.data()[0] / n));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn pool_pair_grad(pooling: Pooling, a: f64, b: f64, y: f64) -> (f64, f64) {
    match pooling {
        Pooling::Avg => (0.5, 0.5),
        Pooling::Min => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        Pooling::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        Pooling::L2 => {
            if y == 0.0 {
                (0.0, 0.0)
            } else {
                (0.5 * a / y, 0.5 * b / y)
            }
        }
    }
}

fn pool_single_grad(pooling: Pooling, a: f64) -> f64 {
    match pooling {
        Pooling::L2 => {
            if a == 0.0 {
                0.0
            } else {
                a.signum()
            }
        }
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor, frozen: bool) -> ParamStore {
        let mut s = ParamStore::new();
        if frozen {
            s.insert_frozen(name, t).unwrap();
        } else {
            s.insert_trainable(name, t).unwrap();
        }
        s
    }

    #[test]
    fn square_derivative() {
        let store = store_with("x", Tensor::scalar(3.0), false);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function_has_empty_gradient_map() {
        let store = store_with("x", Tensor::scalar(3.0), false);
        let mut tape = Tape::new();
        let _x = tape.param(&store, "x").unwrap();
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.scale(c, 2.0);
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(g.params.is_empty());
    }

    #[test]
    fn frozen_parameters_are_absent() {
        let store = store_with("w", Tensor::scalar(2.0), true);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(g.params.is_empty());
    }

    #[test]
    fn seed_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(
            tape.backward(x, &Tensor::zeros(&[4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let store = store_with("x", Tensor::scalar(2.0), false);
        let mut tape = Tape::new();
        let a = tape.param(&store, "x").unwrap();
        let b = tape.param(&store, "x").unwrap();
        assert_eq!(a, b);
        let y = tape.add(a, b).unwrap();
        let y = tape.mul(y, a).unwrap(); // 2x²
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[8.0]);
    }

    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Central finite differences over every input entry of a scalarised op.
    fn check_op(name: &str, shapes: &[Vec<usize>], build: Build, rng: &mut ChaCha8Rng) {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::uniform(s, 1.0, rng))
            .collect();
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = build(&mut tape, &vars).unwrap();
            tape.shape(y).to_vec()
        };
        let seed = Tensor::uniform(&out_shape, 1.0, rng);
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = build(&mut tape, &vars).unwrap();
            tape.value(y).mul(&seed).unwrap().sum()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(y, &seed).unwrap();
        let h = 1e-5;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&shapes[k]));
            for e in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{name}: input {k} entry {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                t.matmul(v[0], v[1])
            }),
            ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
                t.add(v[0], v[1])
            }),
            ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
                t.sub(v[0], v[1])
            }),
            ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
                t.mul(v[0], v[1])
            }),
            ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
                t.add_row(v[0], v[1])
            }),
            ("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -1.7))),
            ("gelu", vec![vec![3, 3]], |t, v| Ok(t.gelu(v[0]))),
            ("softmax1", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
            ("softmax0", vec![vec![3, 5]], |t, v| t.softmax(v[0], 0)),
            ("causal", vec![vec![4, 4]], |t, v| {
                t.masked_softmax(v[0], true)
            }),
            ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
            ("conv_rep", vec![vec![7, 2], vec![3, 2, 3]], |t, v| {
                t.conv1d(v[0], v[1], Padding::Replicate)
            }),
            ("conv_zero", vec![vec![7, 2], vec![3, 2, 5]], |t, v| {
                t.conv1d(v[0], v[1], Padding::Zero)
            }),
            ("transpose", vec![vec![2, 5]], |t, v| t.transpose(v[0])),
            ("slice_rows", vec![vec![5, 3]], |t, v| {
                t.slice_rows(v[0], 1, 3)
            }),
            ("slice_cols", vec![vec![5, 4]], |t, v| {
                t.slice_cols(v[0], 1, 2)
            }),
            ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| {
                t.concat_rows(&[v[0], v[1]])
            }),
            ("concat_cols", vec![vec![3, 2], vec![3, 4]], |t, v| {
                t.concat_cols(&[v[0], v[1]])
            }),
            ("reshape", vec![vec![3, 4]], |t, v| {
                t.reshape(v[0], &[1, 12])
            }),
            ("pool_avg", vec![vec![7, 2]], |t, v| {
                t.pool_time(v[0], Pooling::Avg)
            }),
            ("pool_max", vec![vec![7, 2]], |t, v| {
                t.pool_time(v[0], Pooling::Max)
            }),
            ("pool_min", vec![vec![7, 2]], |t, v| {
                t.pool_time(v[0], Pooling::Min)
            }),
            ("pool_l2", vec![vec![7, 2]], |t, v| {
                t.pool_time(v[0], Pooling::L2)
            }),
            ("moving_avg", vec![vec![9, 2]], |t, v| {
                t.moving_average(v[0], 5)
            }),
            ("gather", vec![vec![4, 3]], |t, v| {
                t.gather_rows(v[0], &[2, 0, 2])
            }),
            ("sum", vec![vec![3, 2]], |t, v| Ok(t.sum(v[0]))),
            ("mean", vec![vec![3, 2]], |t, v| Ok(t.mean(v[0]))),
        ];
        for round in 0..4 {
            for (name, shapes, build) in &cases {
                check_op(&format!("{name}#{round}"), shapes, *build, &mut rng);
            }
        }
    }

    fn composite(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.gelu(h);
        let ones = t.constant(Tensor::ones(&[4]));
        let zeros = t.constant(Tensor::zeros(&[4]));
        let h = t.layer_norm(h, ones, zeros, 1e-5)?;
        let s = t.masked_softmax(h, false)?;
        let m = t.moving_average(s, 3)?;
        let r = t.mul(m, h)?;
        Ok(t.sum(r))
    }

    #[test]
    fn composite_chains_match_finite_differences_over_seeded_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            let rows = rng.random_range(2..6);
            check_op(
                &format!("composite#{case}"),
                &[vec![rows, 3], vec![3, 4], vec![4]],
                composite,
                &mut rng,
            );
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 3]));
        let p = tape.masked_softmax(x, true).unwrap();
        let v = tape.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }
}
