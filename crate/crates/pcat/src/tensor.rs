//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable shape + flat data pair. All differentiable
//! structure lives in [`crate::autodiff`]; this module only holds values and
//! the raw kernels shared by forward and backward passes.

use crate::error::{Error, Result};
use crate::float::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    /// Build a tensor, enforcing `product(shape) == data.len()` and all
    /// dimensions ≥ 1.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must have rank >= 1 with all dims >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-2 tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("from_rows: no rows"));
        }
        let c = rows[0].len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("from_rows: ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn nrows(&self) -> usize {
        if self.rank() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Columns of a rank-2 tensor (length for rank-1).
    pub fn ncols(&self) -> usize {
        if self.rank() == 1 {
            self.shape[0]
        } else {
            self.shape[1]
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.ncols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += other * s` (shapes must match).
    pub fn axpy(&mut self, other: &Tensor<T>, s: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * s;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Lossy precision change (used by the f32 checkpoint format).
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`. The i-k-j loop order keeps
/// the inner loop contiguous so it vectorizes.
pub(crate) fn matmul_into<T: Float>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

/// `out = a^T` for row-major `a: r×c`.
pub(crate) fn transpose_into<T: Float>(a: &[T], out: &mut [T], r: usize, c: usize) {
    debug_assert_eq!(a.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
}

/// Max-subtracted softmax of one contiguous lane, written into `out`.
pub(crate) fn softmax_lane<T: Float>(x: &[T], out: &mut [T]) {
    let mut mx = x[0];
    for &v in &x[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants_enforced() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_kernel_hand_case() {
        // [[1,2],[3,4]] · [[1],[1]] = [[3],[7]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0f64; 2];
        matmul_into(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn transpose_kernel() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut t = [0.0f64; 6];
        transpose_into(&a, &mut t, 2, 3);
        assert_eq!(t, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn softmax_lane_stability() {
        let mut out = [0.0f64; 2];
        softmax_lane(&[1000.0, 0.0], &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-300);
        assert_eq!(out[1], 0.0);
    }
}
