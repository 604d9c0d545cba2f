//! Dense row-major `f32` tensors and the raw kernels shared by the autodiff
//! graph and the tape-free inference path.
//!
//! Reductions (matmul, softmax, layer norm) accumulate in `f64`; storage stays
//! `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interprets the tensor as a matrix: 1-D tensors are a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows_cols().0
    }

    pub fn cols(&self) -> usize {
        self.rows_cols().1
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.rows_cols();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Rows `indices` of a matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![indices.len(), c],
            data,
        }
    }

    /// Columns `indices` of a matrix (or entries of a vector), in order.
    pub fn select_cols(&self, indices: &[usize]) -> Self {
        let (r, c) = self.rows_cols();
        let mut data = Vec::with_capacity(indices.len() * r);
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(indices.iter().map(|&j| row[j]));
        }
        let shape = if self.shape.len() == 1 {
            vec![indices.len()]
        } else {
            vec![r, indices.len()]
        };
        Self { shape, data }
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = x as f32;
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow) as f32;
        }
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; result is `k×n`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            for (o, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    acc.into_iter().map(|x| x as f32).collect()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated gelu.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())) as f32
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner) as f32
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    (1.0 / (1.0 + (-x).exp())) as f32
}

/// Row-wise softmax over the last dimension of a `rows×cols` buffer.
pub fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(xr, or);
    }
    out
}

pub fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v as f64 - max).exp();
        *o = e as f32;
        total += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / total) as f32;
    }
}

/// Row-wise log-softmax, computed in `f64`.
pub fn log_softmax_row(x: &[f32]) -> Vec<f64> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = x.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v as f64 - lse).collect()
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Mean and reciprocal standard deviation of `row` restricted to `support` (all
/// columns when `None`). An empty support yields `(0, 0)`.
pub fn layer_norm_stats(row: &[f32], support: Option<&[usize]>) -> (f64, f64) {
    let (sum, n) = match support {
        None => (row.iter().map(|&v| v as f64).sum::<f64>(), row.len()),
        Some(s) => (s.iter().map(|&k| row[k] as f64).sum::<f64>(), s.len()),
    };
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = match support {
        None => row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>(),
        Some(s) => s.iter().map(|&k| (row[k] as f64 - mean).powi(2)).sum::<f64>(),
    } / n as f64;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Layer norm over the full width of each row.
pub fn layer_norm_rows(x: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let cols = gamma.len();
    let mut out = vec![0.0f32; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let (mean, rstd) = layer_norm_stats(xr, None);
        for k in 0..cols {
            or[k] = ((xr[k] as f64 - mean) * rstd * gamma[k] as f64 + beta[k] as f64) as f32;
        }
    }
    out
}
