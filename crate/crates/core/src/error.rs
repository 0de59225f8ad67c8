use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: dimension mismatch, expected {expected} got {got}")]
    Dimension {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("{layer}: non-finite value encountered")]
    NonFinite { layer: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("control input out of bounds: {0}")]
    OutOfBounds(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("root finding failed at node (torque {torque} N·m, speed {speed} rpm): {reason}")]
    Calibration {
        torque: f64,
        speed: f64,
        reason: String,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("model file {path}: {reason}")]
    ModelFormat { path: String, reason: String },

    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("controller fault at cycle {cycle}: {reason}")]
    ControllerFault { cycle: usize, reason: String },

    #[error("{0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(layer: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            layer: layer.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
