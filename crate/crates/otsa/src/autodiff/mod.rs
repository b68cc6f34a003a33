//! Reverse-mode automatic differentiation over dense 64-bit arrays.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tensor`] is a
//! value that may carry a link back to the tape node that produced it.
//! Detached tensors are plain immutable values. The backward pass walks the
//! tape in reverse and expresses every vector-Jacobian product in terms of
//! the same primitives, so gradients can themselves be recorded
//! (`create_graph`) when an objective needs to differentiate through an
//! inner gradient step.

mod array;
mod tape;
mod tensor;

pub use array::Array;
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("rows of unequal length")]
    RaggedRows,
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected 2-d array, got shape {shape:?}")]
    NotTwoDim { shape: Vec<usize> },
    #[error("{op}: domain error at flat index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: reduction over an empty extent")]
    EmptyReduction { op: &'static str },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("operands live on different tapes")]
    TapeMismatch,
    #[error("backward requested on a tensor with no tape link")]
    NotOnTape,
    #[error("backward seed must be scalar or an explicit cotangent (output shape {shape:?})")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("cotangent shape {got:?} does not match output shape {expected:?}")]
    CotangentShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("gather/scatter index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("reshape {from:?} -> {to:?} changes element count")]
    BadReshape { from: Vec<usize>, to: Vec<usize> },
}
