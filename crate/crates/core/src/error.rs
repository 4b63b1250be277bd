//! Crate-wide error type.
//!
//! Shape and contract violations panic (programmer errors); everything
//! data- or environment-dependent comes back as a [`Error`].

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("refusing to overwrite {0} (pass --force to allow)")]
    WouldOverwrite(PathBuf),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data { path: path.into(), message: message.into() }
    }

    /// Process exit code for the CLI: 1 = usage error, 2 = data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::WouldOverwrite(_) | Error::UnknownMethod(_) => 1,
            Error::InsufficientData(_)
            | Error::Data { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
