//! Error categories shared by every module.

use thiserror::Error;

/// Library-wide error type. Each variant is one error category; the CLI
/// surfaces the category name in its exit message.
#[derive(Debug, Error)]
pub enum TablError {
    /// Incompatible matrix/tensor dimensions.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid or inconsistent configuration values.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed input files.
    #[error("parse error: {0}")]
    Parse(String),
    /// Operation called in the wrong order (e.g. backward without a cache).
    #[error("state error: {0}")]
    State(String),
    /// Content-hash or container version mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// Semantically invalid values (bad label, empty dataset, ...).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TablError {
    /// Short category tag used by the CLI for exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            TablError::Shape(_) => "shape",
            TablError::Config(_) => "config",
            TablError::Parse(_) => "parse",
            TablError::State(_) => "state",
            TablError::Integrity(_) => "integrity",
            TablError::Domain(_) => "domain",
            TablError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, TablError>;
