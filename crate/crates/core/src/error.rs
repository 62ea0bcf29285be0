use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or structural argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// POVM coefficients leave the unit disk.
    #[error("invalid POVM: a^2 + b^2 = {0} exceeds 1")]
    InvalidPovm(f64),

    /// Grid does not cover the requested domain or is too small.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// A formula hit a guarded degenerate point (division by a vanished probability).
    #[error("degenerate evaluation: {0}")]
    Degenerate(String),

    /// Cardinality too large for exact enumeration.
    #[error("cardinality {0} too large for exact enumeration (limit 20)")]
    TooLarge(u32),

    /// Text import failed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
