use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f32` array of rank 1 to 3 with an optional gradient buffer.
///
/// Most kernels view a tensor as a matrix: rank 1 `[d]` is a `1×d` row and
/// rank 3 `[a, b, c]` is an `(a·b)×c` stack of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Shape(format!(
            "rank must be 1..=3, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds an `n×d` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[n, d], data)
    }

    /// Uniform initialisation in `[-limit, limit]`.
    pub fn uniform<R: Rng>(shape: &[usize], limit: f32, rng: &mut R) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    /// Glorot-uniform initialisation for a `fan_in×fan_out` weight.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self::uniform(&[fan_in, fan_out], limit, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` under the matrix view.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap();
        (self.data.len() / cols, cols)
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
            grad: None,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(&[idx.len(), c], data)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} != tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Dot product accumulated in `f64`.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

/// Standard matrix product `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2();
    let (k2, m) = b.dims2();
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {n}x{k} by {k2}x{m}"
        )));
    }
    let bt = b.transpose();
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ar, &bt.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::new(&[n, m], out)
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let (m, _) = b.dims2();
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ar, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
        grad: None,
    }
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        let o = &mut out[i * c..(i + 1) * c];
        for (dst, &v) in o.iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *dst = e as f32;
            total += e;
        }
        for dst in o.iter_mut() {
            *dst = (*dst as f64 / total) as f32;
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
        grad: None,
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row statistics produced by [`layer_norm_with_stats`]: `(mean, 1/σ)`.
pub(crate) type RowStats = Vec<(f64, f64)>;

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, RowStats)> {
    let (r, d) = x.dims2();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias length {}/{} != width {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0f32; r * d];
    let mut stats = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            out[i * d + j] = (xhat * gain.data[j] as f64 + bias.data[j] as f64) as f32;
        }
        stats.push((mean, rstd));
    }
    Ok((
        Tensor {
            shape: vec![r, d],
            data: out,
            grad: None,
        },
        stats,
    ))
}

/// Row-wise layer normalisation with affine gain and bias (population variance, ε = 1e-5).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_with_stats(x, gain, bias).map(|(t, _)| t)
}

/// Cosine similarity of two vectors with norms clamped at `1e-8`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt().max(NORM_CLAMP) * bb.sqrt().max(NORM_CLAMP))
}

pub const NORM_CLAMP: f64 = 1e-8;
