//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector {index} has zero norm")]
    ZeroNormVector { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cost matrix contains a non-finite or negative entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(&'static str),

    #[error("instance too large for exact solver: {cells} cells (limit {limit})")]
    InstanceTooLarge { cells: usize, limit: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("all clusters are empty")]
    AllEmpty,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called with a cache that does not match the parameters")]
    StaleCache,

    #[error("novel class {class} has no initialisation features")]
    EmptyInitClass { class: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("declared novel class {class} has no samples in the fine-tuning set")]
    MissingNovelClasses { class: u32 },

    #[error("test set contains class {class} unknown to the classifier")]
    UnknownClassInTestSet { class: u32 },

    #[error("class {class} has {available} samples, {requested} requested")]
    NotEnoughSamples {
        class: u32,
        available: usize,
        requested: usize,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid roster: {0}")]
    Roster(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_) => ErrorCategory::Usage,
            Error::ZeroNormVector { .. }
            | Error::NonFinite(_)
            | Error::NonFiniteCost { .. }
            | Error::DegenerateMarginal(_)
            | Error::AllEmpty
            | Error::StaleCache => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}
