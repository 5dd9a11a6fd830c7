//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] records operations during the forward pass (define-by-run)
//! and replays them in reverse to accumulate gradients. Trainable values
//! live in a [`ParamStore`]; each episode copies them onto a fresh tape,
//! runs forward/backward, and scatters gradients back by [`ParamId`].

pub mod adam;
pub mod fdcheck;
pub mod params;
pub mod tape;
pub mod tensor;


pub use adam::AdamState;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{concat, stack_rows, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: operand contains {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("empty reduction over {op}")]
    EmptyReduction { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("row index {row} out of range for matrix with {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}
