use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the memprobe toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("wrong IDX magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated IDX payload: header promises {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("insufficient samples: need {needed}, have {available} ({context})")]
    InsufficientSamples {
        needed: usize,
        available: usize,
        context: String,
    },

    #[error("shuffle fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at epoch {epoch}: training aborted")]
    NonFiniteLoss { epoch: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {min} permutations for a verdict, got {got}")]
    InsufficientPermutations { min: usize, got: usize },

    #[error("runs are not comparable: {0}")]
    MismatchedExperimentKeys(String),

    #[error("corrupt store at {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },

    #[error("store has no results: {0}")]
    NoResults(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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

pub type Result<T> = std::result::Result<T, Error>;
