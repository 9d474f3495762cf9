//! Error type shared by all planner modules.

/// Errors produced by the planning library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A documented type invariant does not hold (non-PSD covariance, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// The NLP solver could not produce a usable iterate.
    #[error("solver failure: {0}")]
    Solver(String),
    /// A scenario file is missing, malformed or violates an invariant.
    #[error("scenario error: {0}")]
    Scenario(String),
    /// File I/O while reading scenarios or writing outputs.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
