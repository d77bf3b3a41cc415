use std::path::PathBuf;

use thiserror::Error;
use translocator_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidCoord { lat: f64, lon: f64 },

    #[error("empty point set")]
    EmptyPointSet,

    #[error("no retainable cells at level {0}")]
    NoRetainableCells(&'static str),

    #[error("class id {id} out of range for {count} {level} cells")]
    ClassOutOfRange {
        level: &'static str,
        id: usize,
        count: usize,
    },

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Validation(String),

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
