use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the framework.
///
/// Each variant maps onto one CLI exit code via [`AespError::exit_code`].
#[derive(Debug, Error)]
pub enum AespError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("missing embedding for template text(s): {}", .0.join(" | "))]
    MissingEmbedding(Vec<String>),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AespError> = std::result::Result<T, E>;

impl AespError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AespError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 2 config, 3 data, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AespError::Config(_) | AespError::Protocol(_) => 2,
            AespError::Data(_) | AespError::MissingEmbedding(_) => 3,
            AespError::Numerical(_) | AespError::Degenerate(_) => 4,
            _ => 1,
        }
    }
}

impl From<safetensors::SafeTensorError> for AespError {
    fn from(e: safetensors::SafeTensorError) -> Self {
        AespError::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for AespError {
    fn from(e: toml::de::Error) -> Self {
        AespError::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for AespError {
    fn from(e: toml::ser::Error) -> Self {
        AespError::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for AespError {
    fn from(e: serde_json::Error) -> Self {
        AespError::Serialization(e.to_string())
    }
}
