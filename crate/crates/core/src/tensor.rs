//! Dense row-major matrices and the deterministic kernels the forward pass
//! is built from.
//!
//! Every reduction accumulates left to right in index order, so identical
//! inputs produce bit-identical outputs on a given build.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2D<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("buffer of {} elements cannot be viewed as {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Element-type conversion (f32 → f64 is exact).
    pub fn cast<U: Scalar>(&self) -> Tensor2D<U> {
        Tensor2D { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::of(v.wide())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite<T: Scalar>(values: &[T], kernel: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(kernel))
    }
}

/// Matrix product `a · b` with `k`-ascending accumulation per output element.
pub fn matmul<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul of {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                *o = *o + aik * bkj;
            }
        }
    }
    check_finite(&out.data, "matmul")?;
    Ok(out)
}

/// Row vector times matrix, `x · w`. Same accumulation order as [`matmul`].
pub fn vec_mat<T: Scalar>(x: &[T], w: &Tensor2D<T>) -> Result<Vec<T>> {
    if x.len() != w.rows {
        return Err(Error::Shape(format!("vector of length {} times {}x{}", x.len(), w.rows, w.cols)));
    }
    let mut out = vec![T::zero(); w.cols];
    for (k, &xk) in x.iter().enumerate() {
        let w_row = w.row(k);
        for (o, &wkj) in out.iter_mut().zip(w_row) {
            *o = *o + xk * wkj;
        }
    }
    check_finite(&out, "vec_mat")?;
    Ok(out)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    check_finite(v, "softmax input")?;
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).wide().exp()).collect();
    let sum: f64 = exps.iter().sum();
    let out: Vec<T> = exps.into_iter().map(|e| T::of(e / sum)).collect();
    check_finite(&out, "softmax")?;
    Ok(out)
}

/// `y_i = gamma_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<T: Scalar>(x: &[T], gamma: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gamma.len() {
        return Err(Error::Shape(format!("rms_norm input length {} vs gamma length {}", x.len(), gamma.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("rms_norm of an empty vector".into()));
    }
    let sum_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let mean_sq = sum_sq / T::of(x.len() as f64);
    let inv = T::one() / (mean_sq + eps).sqrt();
    let out: Vec<T> = x.iter().zip(gamma).map(|(&v, &g)| g * (v * inv)).collect();
    check_finite(&out, "rms_norm")?;
    Ok(out)
}

/// Elementwise `acc += x`.
pub(crate) fn add_assign<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
