//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fell outside its mathematical domain (e.g. a coordinate
    /// outside [0,1] or a bin index outside the vocabulary).
    #[error("domain error: {0}")]
    Domain(String),

    /// A category id or schema reference was inconsistent.
    #[error("schema error: {0}")]
    Schema(String),

    /// An element count exceeded the configured maximum.
    #[error("capacity error: {got} elements exceeds maximum {max}")]
    Capacity { got: usize, max: usize },

    /// A sequence still carries MASK tokens where a complete one is required.
    #[error("incomplete sequence: position {0} is still masked")]
    IncompleteSequence(usize),

    /// A token id is inconsistent with the kind of its slot.
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    /// A caller violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Reference retrieval found no corpus layout with a matching
    /// category multiset.
    #[error("retrieval miss: {0}")]
    RetrievalMiss(String),

    /// Unusable input data (unparseable file, empty dataset, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration (unknown key, inconsistent dimensions, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An internal invariant that must hold by construction was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Numerical failure (e.g. covariance eigenvalue below tolerance).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
