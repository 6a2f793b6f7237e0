//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit codes: configuration errors exit 2,
//! data errors 3, numeric failures 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad schedule, unsupported resolution, unknown
    /// strategy, inconsistent model dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape mismatch between a value and its declared grid.
    #[error("shape error: {0}")]
    Shape(String),

    /// Index or scale out of range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Bad data: out-of-range codebook index, malformed manifest line,
    /// corrupt checkpoint payload.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss, gradient, or logit.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// I/O failure, always reported with the path involved.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: 2 config, 3 data/io, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Bounds(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
