//! Minimal dense-array compute kernel with reverse-mode differentiation.
//!
//! A [`Tape`] owns every array created during one forward pass and records
//! the primitive operations that produced them. [`Tape::backward`] replays
//! the record in reverse, accumulating vector-Jacobian products into every
//! array that requires gradients. Tapes are single-use: one forward pass,
//! one backward pass, then the record is dropped.
//!
//! Reductions inside every primitive accumulate in `f64` (see
//! [`crate::scalar`]) so single-precision forward passes stay stable when
//! summation order changes.

mod array;
pub mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use array::{ArrayId, DiffArray};
pub use tape::{Normalized, ReduceKind, Tape, UnaryKind};

use thiserror::Error;

/// Errors raised by tape operations.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    Consumed,
    #[error("{op}: row index {index} out of range ({bound} rows)")]
    RowIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
