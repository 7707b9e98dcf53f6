use thiserror::Error;

/// Errors raised by every module of the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("schema mismatch: expected {expected} values, got {got}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("value {value} out of range for feature `{feature}`")]
    RangeViolation { feature: String, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cluster count {k} must be within 1..={n}")]
    BadK { k: usize, n: usize },

    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("duplicate label for subject `{subject_id}` at t={observed_at}")]
    DuplicateLabel { subject_id: String, observed_at: u64 },

    #[error("conflicting record for subject `{subject_id}` at t={collected_at}")]
    ConflictingRecord { subject_id: String, collected_at: u64 },

    #[error("corrupt snapshot at {location}: {reason}")]
    CorruptSnapshot { location: String, reason: String },

    #[error("scenario error at event {event}: {reason}")]
    Scenario { event: String, reason: String },

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
