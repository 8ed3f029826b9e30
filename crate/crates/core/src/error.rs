use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by `{kernel}`{context}")]
    Numeric { kernel: &'static str, context: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequence of length {len} exceeds the model window of {max}")]
    Truncation { len: usize, max: usize },

    #[error("mask schedule error: {0}")]
    Schedule(String),

    #[error("task context error: {0}")]
    Context(String),

    #[error("selection pool error: {0}")]
    Pool(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("replay buffer error: {0}")]
    Buffer(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("state error: {0}")]
    State(String),

    #[error("episode with seed {seed} failed twice: {reason}")]
    Episode { seed: u64, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Attaches a location (for example a layer index) to a numeric error.
    pub fn within(self, location: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { kernel, context } => Error::Numeric {
                kernel,
                context: format!("{context} in {location}"),
            },
            other => other,
        }
    }
}
