//! Dense row-major tensor of `f64` values.
//!
//! This is the plain value type carried between pipeline stages (feature
//! maps, fused tensors, model parameters). Gradient tracking lives in
//! [`crate::autodiff::Tape`]; a `Tensor` only records whether it *wants*
//! gradients via [`Tensor::requires_grad`].
//!
//! Layout convention used across the crate: the last axis is fastest
//! (row-major). Rank-3 tensors are indexed `(slice, row, col)` where the
//! row axis is the image height / time axis and the column axis is width.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for a rank-2 tensor.
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        r * self.shape[1] + c
    }

    /// Flat index for a rank-3 tensor.
    pub fn idx3(&self, s: usize, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (s * self.shape[1] + r) * self.shape[2] + c
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[self.idx2(r, c)]
    }

    pub fn at3(&self, s: usize, r: usize, c: usize) -> f64 {
        self.data[self.idx3(s, r, c)]
    }

    pub fn set3(&mut self, s: usize, r: usize, c: usize, v: f64) {
        let i = self.idx3(s, r, c);
        self.data[i] = v;
    }
}
