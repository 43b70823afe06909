//! Dense row-major 2-D tensors with deterministic kernels.
//!
//! All products accumulate as plain ascending-index dot products so that the
//! full-sequence (training) path and the incremental (decoding) path add the
//! same numbers in the same order. Determinism is load-bearing: the causality
//! and cache-equivalence checks compare results bitwise in 64-bit.

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, std).expect("std must be finite");
        let data = (0..rows * cols)
            .map(|_| S::from_f64(normal.sample(rng)))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer with new dimensions; element order unchanged.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor<S> {
        assert_eq!(rows * cols, self.data.len(), "reshape length mismatch");
        Tensor {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    /// `self (m,k) · other (k,n)`.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let mut acc = S::zero();
                for p in 0..k {
                    acc = acc + a[p] * other.data[p * n + j];
                }
                out.data[i * n + j] = acc;
            }
        }
        out
    }

    /// `self (m,k) · otherᵀ` where `other` is `(n,k)`.
    pub fn matmul_t(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let b = other.row(j);
                let mut acc = S::zero();
                for p in 0..k {
                    acc = acc + a[p] * b[p];
                }
                out.data[i * n + j] = acc;
            }
        }
        out
    }

    /// `selfᵀ · other` where `self` is `(m,k)` and `other` is `(m,n)`.
    pub fn matmul_at(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.rows, other.rows, "matmul_at outer dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(k, n);
        for i in 0..m {
            let a = self.row(i);
            let b = other.row(i);
            for p in 0..k {
                let ap = a[p];
                let dst = &mut out.data[p * n..(p + 1) * n];
                for j in 0..n {
                    dst[j] = dst[j] + ap * b[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, c: S) {
        for a in self.data.iter_mut() {
            *a = *a * c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product over equal-length slices, ascending index order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// `w (out,in) · x (in)` as per-row dots; matches `Tensor::matmul_t` ordering.
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &[S]) -> Vec<S> {
    assert_eq!(w.cols(), x.len(), "matvec inner dims");
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}
