//! Crate-wide error type.
//!
//! One enum covers every failure class the library reports; variants are
//! grouped by what went wrong rather than where, so callers can map them to
//! exit codes without matching on module-specific types.

/// Library error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up (matmul, element-wise ops, folding).
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument value is outside its documented domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// A size exceeds the desk-scale resource budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    /// A dimension is unsupported by construction (e.g. not a power of two).
    #[error("unsupported dimension: {0}")]
    Dimension(String),
    /// A serialized artifact is malformed.
    #[error("file format: {0}")]
    Format(String),
    /// A model or lock could not be built from the given configuration.
    #[error("construction failed: {0}")]
    Construction(String),
    /// No candidate satisfied a selection rule.
    #[error("selection failed: {0}")]
    Selection(String),
    /// A configuration value is inconsistent with the requested operation.
    #[error("configuration error: {0}")]
    Config(String),
    /// An internal simulator invariant was violated; always a bug.
    #[error("simulator invariant violated: {0}")]
    Simulator(String),
    /// A computation produced a non-finite value it cannot recover from.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
