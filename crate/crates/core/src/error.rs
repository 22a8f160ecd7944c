use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum ToeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no valid units")]
    NoValidUnits,

    #[error("padding selected: note chunk {0} has presence 0")]
    PaddingSelected(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("instance {id}: invalid {field}: {message}")]
    InvalidInstance {
        id: String,
        field: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),

    #[error("instance too large for oracle ({0} candidate units, limit 14)")]
    OracleTooLarge(usize),

    #[error("attempted to update frozen part {0}")]
    FrozenPart(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ToeError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        ToeError::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ToeError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ToeError>;
