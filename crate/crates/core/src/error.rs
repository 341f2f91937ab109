use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EspaceError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {msg} (residual {residual:e})")]
    Numerical { msg: String, residual: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("rank policy error: {0}")]
    Policy(String),

    #[error("config error: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("state error: {0}")]
    State(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EspaceError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        EspaceError::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        EspaceError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        EspaceError::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EspaceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EspaceError>;
