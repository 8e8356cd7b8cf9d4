//! Dense row-major `f64` tensors and the raw kernels the tape is built on.
//!
//! Everything here is a plain value computation; differentiation lives in
//! [`crate::tape`]. Matrices are 2-D tensors and vectors are stored as
//! `1 × n` rows, so every weight product can be written as `rows · Wᵀ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// the data length equals the product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![1, n], data).expect("non-empty row")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix (the whole tensor counts as one row otherwise).
    pub fn rows(&self) -> usize {
        if self.is_matrix() {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        if self.is_matrix() {
            self.shape[1]
        } else {
            self.data.len()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    #[must_use]
    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }
}

pub(crate) fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(Error::dim(op, t.shape(), &[0, 0]))
    }
}

pub(crate) fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, _) = require_matrix("matmul", a)?;
    let (_, n) = require_matrix("matmul", b)?;
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b)?;
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, _) = require_matrix("matmul_nt", a)?;
    let (n, _) = require_matrix("matmul_nt", b)?;
    let mut out = vec![0.0; m * n];
    matmul_nt_acc(&mut out, a, b)?;
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, m) = require_matrix("matmul_tn", a)?;
    let (_, n) = require_matrix("matmul_tn", b)?;
    let mut out = vec![0.0; m * n];
    matmul_tn_acc(&mut out, a, b)?;
    Tensor::matrix(m, n, out)
}

/// `out += a · b`.
pub(crate) fn matmul_acc(out: &mut [f64], a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 || out.len() != m * n {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        for (p, &x) in a.row_slice(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            axpy(out_row, x, b.row_slice(p));
        }
    }
    Ok(())
}

/// `out += a · bᵀ`.
pub(crate) fn matmul_nt_acc(out: &mut [f64], a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 || out.len() != m * n {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        let ar = a.row_slice(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(ar, b.row_slice(j));
        }
    }
    Ok(())
}

/// `out += aᵀ · b`.
pub(crate) fn matmul_tn_acc(out: &mut [f64], a: &Tensor, b: &Tensor) -> Result<()> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, n) = require_matrix("matmul_tn", b)?;
    if k != k2 || out.len() != m * n {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    for p in 0..k {
        let br = b.row_slice(p);
        for (i, &x) in a.row_slice(p).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            axpy(&mut out[i * n..(i + 1) * n], x, br);
        }
    }
    Ok(())
}

/// `y += a · x`.
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data[i * n + j]);
        }
    }
    Tensor::matrix(n, m, out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent lanes let the compiler vectorise; the summation order is
    // still fixed, so results stay reproducible.
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("softmax_rows", a)?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = a.row_slice(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::matrix(m, n, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(x)` over all entries, stabilised by the maximum.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(x)[target]`, exact to relative precision even when the
/// target dominates (the loss is then far below one ulp of the logits).
pub fn cross_entropy(x: &[f64], target: usize) -> f64 {
    let (top, max) = x
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, v)| if v > bm { (i, v) } else { (bi, bm) });
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - x[target]) + rest.ln_1p()
}

/// Population (denominator `N`) standard deviation of all entries.
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
