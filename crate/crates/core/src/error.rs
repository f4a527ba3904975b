//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps these onto exit codes: input/shape/parse problems are
/// usage errors (exit 1), numerical and training failures are exit 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: shape mismatch, out-of-vocab token, bad range.
    #[error("input error: {0}")]
    Input(String),

    /// A scalar parameter outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Problem size exceeds what an exact method is allowed to attempt.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A computation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Gate training diverged; `step` is the first offending step.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    /// A cache store violated its structural invariants.
    #[error("internal consistency error: {0}")]
    State(String),

    /// A serialized artifact (alpha matrix, solution, dataset) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
