use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal of {len} samples is shorter than one window of {win}")]
    SignalTooShort { len: usize, win: usize },

    #[error("overlap-add normalizer underflow at output sample {index} ({value:e})")]
    NormalizerUnderflow { index: usize, value: f64 },

    #[error("sample rate mismatch: expected {expected} Hz, got {found} Hz{}", .path.as_ref().map(|p| format!(" in {}", p.display())).unwrap_or_default())]
    SampleRate {
        expected: u32,
        found: u32,
        path: Option<PathBuf>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: u64, term: String },

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
