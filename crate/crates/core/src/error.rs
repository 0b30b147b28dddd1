use std::path::PathBuf;

use crate::store::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed {what}: {message}", path.display())]
    Format {
        path: PathBuf,
        what: &'static str,
        message: String,
    },

    #[error("matrix size mismatch: manifest implies {expected} bytes, found {actual}")]
    MatrixSizeMismatch { expected: u64, actual: u64 },

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("record {id:?} points at row {row}, but the bundle has {count} rows")]
    RowOutOfRange { id: String, row: usize, count: usize },

    #[error("invalid bundle: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{0}")]
    Empty(&'static str),

    #[error("no retrieval result for sample {0:?}")]
    MissingRetrieval(String),

    #[error("caption {0:?} not found in corpus")]
    UnknownCaption(String),

    #[error("sample {id:?}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("label {0:?} has no pinned center")]
    UnpinnedLabel(String),

    #[error("known class {0:?} has no labelled samples")]
    ClassWithoutLabelled(String),

    #[error("need {needed} distinct unlabelled rows to seed novel centers, found {found}")]
    TooFewUnlabelled { needed: usize, found: usize },

    #[error("batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("row {0}: empty positive set")]
    EmptyPositiveSet(usize),

    #[error("row {0} is unlabelled")]
    Unlabelled(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite cost entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, what: &'static str, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            what,
            message: message.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the CLI: 1 internal, 2 bad input or config, 3 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } | Error::Sample { source, .. } => source.exit_code(),
            Error::Io { source, .. } => match source.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 2,
                _ => 1,
            },
            Error::Invalid(_) | Error::NonFinite { .. } | Error::DuplicateId(_) | Error::RowOutOfRange { .. } => 3,
            Error::Locked(_) => 1,
            _ => 2,
        }
    }
}
