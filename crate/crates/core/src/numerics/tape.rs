//! Tape-based reverse-mode differentiation over a small fixed op vocabulary.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products. A tape is
//! bound to at most one [`ModelParams`] store, whose tensors enter the graph
//! through [`Tape::param`] without being copied.

use super::params::{ModelParams, ParamId};
use super::tensor::{
    dot, layer_norm_with_stats, matmul, matmul_nt, softmax_rows, RowStats, Tensor, NORM_CLAMP,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine {
        x: Var,
        mul: f32,
    },
    Log {
        x: Var,
        floor: f32,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: RowStats,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    CosineMatrix {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    params: Option<&'a ModelParams>,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            params: None,
            bound: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'a ModelParams) -> Self {
        Tape {
            params: Some(params),
            bound: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&'a ModelParams> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input (not part of the parameter store).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter from the attached store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).dims2(), self.value(b).dims2());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `1×d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (n, d) = tx.dims2();
        if tr.len() != d {
            return Err(Error::Shape(format!(
                "add_row: width {d} vs bias {}",
                tr.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for (v, b) in data[i * d..(i + 1) * d].iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(&[n, d], data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `mul·x + add`, elementwise.
    pub fn affine(&mut self, x: Var, mul: f32, add: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| mul * v + add).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, mul }, rg)
    }

    pub fn scale(&mut self, x: Var, by: f32) -> Var {
        self.affine(x, by, 0.0)
    }

    /// Natural log with the argument clamped from below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(floor).ln()).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Log { x, floor }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
            .collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, stats) =
            layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(Error::Shape(format!(
                    "concat_rows: width {} vs {d}",
                    t.cols()
                )));
            }
            n += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[n, d], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let n = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            if t.rows() != n {
                return Err(Error::Shape(format!(
                    "concat_cols: rows {} vs {n}",
                    t.rows()
                )));
            }
            for i in 0..n {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let out = Tensor::new(&[n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Mean(x), rg)
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.rows();
        let data = (0..n)
            .map(|i| (t.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt() as f32)
            .collect();
        let out = Tensor::new(&[n, 1], data).expect("n>=1");
        let rg = self.rg(x);
        self.push(out, Op::RowNorms(x), rg)
    }

    /// `n×n` matrix of pairwise row cosine similarities, norms clamped at `1e-8`.
    pub fn cosine_matrix(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, _) = t.dims2();
        let norms: Vec<f64> = (0..n)
            .map(|i| {
                t.row(i)
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_CLAMP)
            })
            .collect();
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                let d: f64 = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                data[i * n + j] = (d / (norms[i] * norms[j])) as f32;
            }
        }
        let out = Tensor::new(&[n, n], data).expect("n>=1");
        let rg = self.rg(x);
        self.push(out, Op::CosineMatrix { x, norms }, rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
            shapes: (0..self.nodes.len())
                .map(|i| self.value(Var(i)).shape().to_vec())
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(y.shape(), g.to_vec()).expect("grad shape");
                if self.rg(*a) {
                    let da = matmul_nt(&gt, self.value(*b));
                    self.acc(grads, *a, |buf| add_into(buf, da.data()));
                }
                if self.rg(*b) {
                    let db = matmul(&self.value(*a).transpose(), &gt).expect("shapes checked");
                    self.acc(grads, *b, |buf| add_into(buf, db.data()));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(y.shape(), g.to_vec())
                    .expect("grad shape")
                    .transpose();
                self.acc(grads, *a, |buf| add_into(buf, gt.data()));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
                let d = y.cols();
                self.acc(grads, *row, |buf| {
                    for (j, b) in buf.iter_mut().enumerate().take(d) {
                        let s: f64 = g.iter().skip(j).step_by(d).map(|&v| v as f64).sum();
                        *b += s as f32;
                    }
                });
            }
            Op::Affine { x, mul } => {
                self.acc(grads, *x, |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += mul * s;
                    }
                });
            }
            Op::Log { x, floor } => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for k in 0..buf.len() {
                        if vx[k] > *floor {
                            buf[k] += g[k] / vx[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let vy = y.data();
                self.acc(grads, *x, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * vy[k] * (1.0 - vy[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for k in 0..buf.len() {
                        if vx[k] > 0.0 {
                            buf[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, c) = y.dims2();
                let vy = y.data();
                self.acc(grads, *x, |buf| {
                    for i in 0..r {
                        let yr = &vy[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gain).data();
                let (r, d) = vx.dims2();
                let xhat = |i: usize, j: usize| {
                    let (mean, rstd) = stats[i];
                    (vx.data()[i * d + j] as f64 - mean) * rstd
                };
                self.acc(grads, *bias, |buf| {
                    for j in 0..d {
                        let s: f64 = (0..r).map(|i| g[i * d + j] as f64).sum();
                        buf[j] += s as f32;
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for j in 0..d {
                        let s: f64 = (0..r).map(|i| g[i * d + j] as f64 * xhat(i, j)).sum();
                        buf[j] += s as f32;
                    }
                });
                self.acc(grads, *x, |buf| {
                    for i in 0..r {
                        let rstd = stats[i].1;
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g[i * d + j] as f64 * vg[j] as f64).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = (0..d).map(|j| dxhat[j] * xhat(i, j)).sum::<f64>() / d as f64;
                        for j in 0..d {
                            buf[i * d + j] += (rstd * (dxhat[j] - m1 - xhat(i, j) * m2)) as f32;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = y.cols();
                self.acc(grads, *x, |buf| {
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[src * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = y.dims2();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |buf| {
                        for i in 0..n {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |buf| add_into(buf, g));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f32;
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::RowNorms(x) => {
                let vx = self.value(*x);
                let d = vx.cols();
                let vy = y.data();
                self.acc(grads, *x, |buf| {
                    for i in 0..vy.len() {
                        if vy[i] > 0.0 {
                            for j in 0..d {
                                buf[i * d + j] += g[i] * vx.data()[i * d + j] / vy[i];
                            }
                        }
                    }
                });
            }
            Op::CosineMatrix { x, norms } => {
                let vx = self.value(*x);
                let (n, d) = vx.dims2();
                let unit: Vec<f64> = (0..n * d)
                    .map(|k| vx.data()[k] as f64 / norms[k / d])
                    .collect();
                self.acc(grads, *x, |buf| {
                    for i in 0..n {
                        let mut du = vec![0.0f64; d];
                        for j in 0..n {
                            let w = g[i * n + j] as f64 + g[j * n + i] as f64;
                            for k in 0..d {
                                du[k] += w * unit[j * d + k];
                            }
                        }
                        let raw_norm = norms[i];
                        let clamped = (0..d)
                            .map(|k| (vx.data()[i * d + k] as f64).powi(2))
                            .sum::<f64>()
                            .sqrt()
                            < NORM_CLAMP;
                        if clamped {
                            for k in 0..d {
                                buf[i * d + k] += (du[k] / raw_norm) as f32;
                            }
                        } else {
                            let proj: f64 = (0..d).map(|k| unit[i * d + k] * du[k]).sum();
                            for k in 0..d {
                                buf[i * d + k] +=
                                    ((du[k] - unit[i * d + k] * proj) / raw_norm) as f32;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    bound: Vec<Option<Var>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// One gradient tensor per parameter in store order; unused parameters get zeros.
    pub fn param_grads(&self, params: &ModelParams) -> Vec<Tensor> {
        params
            .ids()
            .map(|id| {
                self.bound
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.wrt(v))
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect()
    }
}
