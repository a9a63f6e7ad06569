use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context (paths, ids,
/// dimensions) to surface a one-line diagnostic at the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic (expected {expected})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: checksum mismatch (file corrupt)")]
    ChecksumMismatch { path: PathBuf },

    #[error("{path}: truncated or malformed file: {detail}")]
    MalformedFile { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate identifier: reading_id {0}")]
    DuplicateReadingId(u64),

    #[error("insufficient features: have {have}, need at least {need}")]
    InsufficientFeatures { have: usize, need: usize },

    #[error("empty descriptor: no features to pool")]
    EmptyDescriptor,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no candidates within tau")]
    NoCandidatesWithinTau,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown reading_id {0}")]
    UnknownReadingId(u64),

    #[error("pose outside world extent: ({x:.2}, {y:.2})")]
    PoseOutsideWorld { x: f64, y: f64 },

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
