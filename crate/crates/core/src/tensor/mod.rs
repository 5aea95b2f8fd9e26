//! Dense f64 tensors and a define-by-run reverse-mode autodiff graph.
//!
//! The engine only covers what the two-block point network needs: shared
//! linear layers, batch normalization, ReLU, point-wise max pooling, global
//! feature concatenation and reshaping, plus a handful of scalar helpers
//! used by losses and tests. Every forward pass builds a fresh [`Graph`];
//! [`Graph::backward`] walks it once in reverse creation order.

mod gemm;
mod graph;
mod io;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use graph::{BatchNormMode, BatchStats, Gradients, Graph, RunningStats, Var};
pub use io::{read_tensor, write_tensor, TENSOR_MAGIC};

/// Row-major dense tensor.
///
/// The data buffer is reference counted, so cloning a tensor (e.g. when a
/// parameter is registered on a graph) does not copy it. Mutation goes through
/// [`Tensor::data_mut`], which copies only if the buffer is shared.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::usage(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let count = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; count])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer, copying it first if a graph still holds a reference.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[delta.len()]));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Same buffer, new shape. Fails when element counts differ.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if count != self.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Number of rows when all leading dims are flattened against the last one.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor rank >= 1");
        (self.len() / cols, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_counts() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_row_major_order() {
        let t = Tensor::new(vec![1, 12], (0..12).map(f64::from).collect()).unwrap();
        let r = t.reshape(&[4, 3]).unwrap();
        assert_eq!(r.shape(), &[4, 3]);
        assert_eq!(r.data()[3..6], [3.0, 4.0, 5.0]);
        let back = r.reshape(&[1, 12]).unwrap();
        assert!(back.bit_eq(&t));
        assert!(t.reshape(&[5, 3]).is_err());
    }

    #[test]
    fn data_mut_does_not_touch_shared_clone() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 9.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
