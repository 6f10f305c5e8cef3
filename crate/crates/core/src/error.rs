use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op} called on empty input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate turn {turn} in session {session}")]
    DuplicateTurn { session: String, turn: usize },
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used by the CLI for its error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Domain { .. } | Error::Empty { .. } => "math",
            Error::NonScalarLoss(_) => "math",
            Error::Parse { .. } | Error::DuplicateTurn { .. } | Error::Json(_) => "parse",
            Error::OutOfRange { .. } | Error::Config(_) | Error::Unsupported(_) => "usage",
            Error::NonFiniteGradient(_) | Error::Diverged { .. } => "training",
            Error::Vocab(_) => "vocab",
            Error::Io { .. } => "io",
        }
    }
}
