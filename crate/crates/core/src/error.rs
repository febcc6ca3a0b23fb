//! Error taxonomy shared across the simulator.

use std::path::PathBuf;

/// Everything that can go wrong in a simulation run.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value, file, or API argument.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor, layer, or plan shape disagreement.
    #[error("schema error: {0}")]
    Schema(String),
    /// Non-finite values or a failed numeric procedure.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed dataset file.
    #[error("format error: {0}")]
    Format(String),
    /// Filesystem failure, with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
