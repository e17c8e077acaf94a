use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    /// A logarithm-like op saw a non-positive argument; some upstream clamp is missing.
    #[error("{op}: argument {value} outside the positive domain (missing clamp upstream?)")]
    Domain { op: &'static str, value: f64 },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a loss that is not recorded on this tape")]
    EmptyTape,

    #[error("spatial size {height}x{width} must be a multiple of {multiple}")]
    Divisibility {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight blob: {0}")]
    WeightFormat(String),

    #[error("malformed file at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("dataset generation: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
