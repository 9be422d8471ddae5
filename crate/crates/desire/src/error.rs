//! Error type shared by every layer of the crate.
//!
//! The CLI maps these onto process exit codes, so the variant of an error is
//! part of the public contract: protocol violations (class leakage) and
//! numeric failures must stay distinguishable from plain I/O problems.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A kernel received or produced a non-finite value, or an optimizer saw
    /// a non-finite gradient/loss.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index (class id, row, task number) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A scalar argument lies outside its documented domain.
    #[error("argument out of range: {0}")]
    Range(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A matrix factorization failed (e.g. Cholesky on a non-SPD input).
    #[error("decomposition failed: {0}")]
    Decomposition(String),

    /// A covariance could not be conditioned into SPD form even at the
    /// largest permitted shrinkage.
    #[error("conditioning failed: {0}")]
    Conditioning(String),

    /// Too few samples to estimate the requested statistic.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Internal consistency check failed (mismatched stores, duplicate ids).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// The incremental-learning protocol was violated: data or classes
    /// crossed a boundary they must never cross.
    #[error("protocol violation: {0}")]
    Leakage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or string could not be parsed (bad magic, truncation, JSON).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: usage/config problems map to 2, I/O to 3,
    /// protocol violations to 4, numeric trouble to 5, the rest to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) => 2,
            Error::Io(_) | Error::Parse(_) => 3,
            Error::Leakage(_) => 4,
            Error::Numeric(_) | Error::Decomposition(_) | Error::Conditioning(_) => 5,
            _ => 1,
        }
    }
}
