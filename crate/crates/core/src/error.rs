use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Training,
    Verification,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("{0}: file has no header or no data rows")]
    EmptyFile(String),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("cannot parse cell at row {row}, column `{column}`: {value:?} is not a valid {expected}")]
    UnparseableCell {
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite feature value at row {row}, feature {feature}")]
    NonFinite { row: usize, feature: usize },

    #[error("row {0} has zero total target weight")]
    ZeroWeightRow(usize),

    #[error("a validation set is required when early stopping is enabled")]
    MissingValidation,

    #[error("metric needs both classes present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("correlation undefined: input vector is constant")]
    ConstantVector,

    #[error("unsupported document version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupted document: {0}")]
    Corrupted(String),

    #[error("denoising removed every row (threshold {threshold})")]
    AllRowsDropped { threshold: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. }
            | Error::Csv(_)
            | Error::EmptyFile(_)
            | Error::MissingColumn(_)
            | Error::UnparseableCell { .. }
            | Error::Schema(_)
            | Error::NonFinite { .. }
            | Error::SingleClass { .. }
            | Error::ConstantVector
            | Error::VersionMismatch { .. }
            | Error::Corrupted(_)
            | Error::LengthMismatch { .. } => ErrorCategory::Data,
            Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::ZeroWeightRow(_)
            | Error::MissingValidation
            | Error::AllRowsDropped { .. }
            | Error::Training(_) => ErrorCategory::Training,
            Error::Verification(_) => ErrorCategory::Verification,
            Error::Stage { source, .. } => source.category(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Corrupted(e.to_string())
    }
}
