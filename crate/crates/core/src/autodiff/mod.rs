//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive records its
//! inputs and output; [`Tape::backward`] walks the record in reverse and adds
//! gradients into trainable leaves.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference, ParamSlots};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorRecord};

pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("softmax: every entry is masked")]
    AllMasked,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: invalid axis or window argument {axis}")]
    Axis { op: &'static str, axis: usize },
    #[error("{0}: no inputs")]
    Empty(&'static str),
}
