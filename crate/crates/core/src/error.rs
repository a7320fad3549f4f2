use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    DataInvariant,
    Numeric,
    Usage,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("non-finite feature value in video {video} segment {segment}")]
    NonFinite { video: String, segment: usize },
    #[error("duplicate video id {0}")]
    DuplicateId(String),
    #[error("invalid video record {video}: {reason}")]
    InvalidVideo { video: String, reason: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("undefined AUC: {positives} positive and {negatives} negative frames")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("label/bundle mismatch: {0}")]
    LabelMismatch(String),
    #[error("mode {0} requires ground truth")]
    MissingGroundTruth(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::MalformedHeader(_)
            | Error::Truncated(_)
            | Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::DuplicateId(_)
            | Error::InvalidVideo { .. }
            | Error::InsufficientData(_)
            | Error::LabelMismatch(_)
            | Error::MissingGroundTruth(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::DataInvariant,
            Error::DegenerateSplit(_) | Error::UndefinedAuc { .. } => ErrorKind::Numeric,
            Error::InvalidArgument(_) => ErrorKind::Usage,
        }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::Truncated(_) => "truncated",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::DuplicateId(_) => "duplicate_id",
            Error::InvalidVideo { .. } => "invalid_video",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::UndefinedAuc { .. } => "undefined_auc",
            Error::LabelMismatch(_) => "label_mismatch",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
