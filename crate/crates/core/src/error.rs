//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes, named after the offending op.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside the mathematical domain of an op.
    #[error("domain error in `{op}`: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An operation needed a non-empty point set or mask.
    #[error("empty point set: {role}")]
    EmptyMask { role: &'static str },

    /// Finite-difference probe produced a non-finite value.
    #[error("gradient probe non-finite at coordinate {coord}")]
    Probe { coord: usize },

    /// Malformed dataset/checkpoint bytes.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Phantom generation could not satisfy its constraints.
    #[error("generation failed after {retries} retries: {msg}")]
    Generation { retries: usize, msg: String },

    /// Training loss became non-finite; carries diagnostics.
    #[error("non-finite loss at batch {batch}: {details}")]
    NonFinite { batch: usize, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
