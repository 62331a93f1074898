use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?} (expected \"COAR\")")]
    BadMagic { found: [u8; 4] },

    #[error("tensor rank {0} exceeds the maximum of 4")]
    RankTooLarge(usize),

    #[error("tensor dimensions overflow: {0}")]
    DimOverflow(String),

    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid synthetic dataset spec: {0}")]
    Synth(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("episode sampling: {0}")]
    Sampling(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite loss at step {step}: {parts}")]
    NonFinite { step: u64, parts: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures map to a distinct process exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::ZeroNorm(_))
    }
}
