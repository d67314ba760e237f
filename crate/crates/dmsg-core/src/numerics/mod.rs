//! Dense/sparse linear algebra and reverse-mode automatic differentiation.
//!
//! Everything is `f64` and deliberately sequential: with a fixed evaluation
//! order the whole training pipeline is bit-reproducible under a seed, which
//! the experiment tooling relies on. Values are validated at op boundaries —
//! any operation that would produce a NaN or infinity reports
//! [`NumericsError::NonFinite`] instead of letting it propagate.

mod check;
mod diff;
mod optim;
mod sparse;
mod tensor;

pub use check::{finite_difference, gradient_check};
pub use diff::{DiffGraph, Gradients, NodeId};
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};
pub use sparse::SparseMatrix;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: shape mismatch ({lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols})")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    /// An operation produced (or was handed) a NaN or infinite value.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    /// Anything else: bad indices, empty inputs, malformed structure.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl NumericsError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        NumericsError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
