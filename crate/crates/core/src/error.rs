//! Error type shared by the solver library.

/// Errors produced by polynomial parsing, problem assembly and the solver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A point, index or vector does not match the ambient dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Two polynomials in different bases were combined.
    #[error("basis mismatch: {0}")]
    BasisMismatch(String),

    /// Malformed polynomial or config file input, with 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A configuration value violates its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Array shapes do not match the problem layout.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A function or gradient evaluation produced NaN or infinity.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A precondition on an operation's arguments was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A state has no usable measure block (all masses numerically zero).
    #[error("degenerate state: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
