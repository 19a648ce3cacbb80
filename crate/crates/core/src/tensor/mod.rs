//! Dense f32 tensors and a reverse-mode autodiff tape.
//!
//! Storage is 32-bit; every reduction and matmul inner loop accumulates in
//! 64-bit before rounding back. There is no implicit broadcasting: elementwise
//! ops demand identical shapes, and row-wise combination with a vector goes
//! through the explicit `add_row` / `mul_row` primitives, which keeps the
//! differentiable surface small enough to finite-difference check in full.

mod tape;

pub use tape::{Tape, TensorRef};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: range {start}..{} exceeds extent {extent}", start + len)]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: element count {got} does not match shape {shape:?}")]
    ElementCount {
        op: &'static str,
        got: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already called on this tape")]
    BackwardTwice,
    #[error("loss is not finite; first non-finite tensor: {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

/// A dense row-major tensor. `grad` is populated on leaves (and interior
/// nodes) by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data,
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![0.0; n], shape)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(vec![value; n], shape)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![value], vec![1])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Marks the tensor as a differentiation root before it is moved onto a
    /// tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}
