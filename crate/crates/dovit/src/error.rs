//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the engine, file formats and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or length mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value violates its allowed range or structure.
    #[error("config error: {0}")]
    Config(String),

    /// Input data fails a semantic check (e.g. non-normalized probabilities).
    #[error("validation error: {0}")]
    Validation(String),

    /// Internal consistency violation (e.g. overlapping scatter indices).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A parameter array required by the model spec is absent from a manifest.
    #[error("missing parameter array: {0}")]
    MissingArray(String),

    /// A manifest array has the wrong shape for the declared model spec.
    #[error("parameter array {name}: expected shape {expected}, found {found}")]
    ArrayShape {
        name: String,
        expected: String,
        found: String,
    },

    /// Payload bytes do not hash to the checksum declared in the manifest.
    #[error("checksum mismatch: manifest declares {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    /// Unsupported or malformed file format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
