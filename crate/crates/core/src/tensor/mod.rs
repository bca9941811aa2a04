//! Minimal tensor substrate: N-dimensional row-major arrays plus a
//! reverse-mode tape providing exactly the operation set the model needs.

mod graph;

pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Real;

/// Dense row-major tensor. The `grad` slot is populated by
/// [`Graph::backward`] for `requires_grad` leaves and is the only part
/// that mutates after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform_fan_in(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut RngState) -> Self {
        let shape = shape.into();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.uniform(-bound, bound))).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// 2-D accessor (row, col).
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Cast element type, e.g. f64 test tensors to f32 training tensors.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Row-major matrix product of raw slices: a[m x k] * b[k x n] -> out[m x n].
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_raw_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul_raw(&eye, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn transpose_round_trip() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose_raw(&x, 3, 4);
        let back = transpose_raw(&t, 4, 3);
        assert_eq!(back, x);
    }
}
