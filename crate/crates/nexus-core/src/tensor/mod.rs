//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: a [`Tape`] records every operation of one
//! forward pass, and [`DiffArray::backward`] replays it in reverse,
//! accumulating gradients. Tapes are cheap and rebuilt per step. Everything
//! is f64 so finite-difference gradient checks are trustworthy.

mod array;
mod tape;
#[cfg(test)]
mod tests;

pub use array::{standard_normal, Array};
pub use tape::{DiffArray, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
