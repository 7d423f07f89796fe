use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("preprocessing error: {0}")]
    Preprocessing(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("conversion error: {0}")]
    Conversion(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Stable numeric category, used for process exit codes and the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Geometry(_) => 10,
            Error::Config(_) => 11,
            Error::Encoding(_) => 12,
            Error::Validation(_) => 13,
            Error::Preprocessing(_) => 14,
            Error::Contract(_) => 15,
            Error::Evaluation(_) => 16,
            Error::Conversion(_) => 17,
            Error::Generation(_) => 18,
            Error::Training(_) => 19,
            Error::Format { .. } => 20,
            Error::Io { .. } => 21,
            Error::Json { .. } => 22,
        }
    }
}
