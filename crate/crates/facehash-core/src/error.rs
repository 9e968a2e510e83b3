use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("identity directory is empty: {0}")]
    EmptyIdentityDir(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("identity {name} has {available} samples, need more than {requested} for the query split")]
    TooFewSamples {
        name: String,
        available: usize,
        requested: usize,
    },

    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model expects {expected}x{expected} input, got {got_h}x{got_w}")]
    WrongInputSize {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss term {term} became non-finite at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: u64 },

    #[error("code length mismatch: {a} vs {b} bits")]
    CodeLengthMismatch { a: usize, b: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("bad file magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    BadVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("checksum mismatch in {0}: file is corrupt")]
    ChecksumMismatch(PathBuf),

    #[error("truncated or corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("checkpoint was trained for {ckpt} bits but index holds {index} bits")]
    BitsMismatch { ckpt: usize, index: usize },

    #[error("io error on {path}: {source}")]
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
