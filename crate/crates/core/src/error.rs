use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Malformed binary container; `offset` is the byte position where reading failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("metadata line {line}: {message}")]
    Metadata { line: usize, message: String },

    #[error("empty vocabulary for task '{0}'")]
    EmptyVocabulary(String),

    #[error("cannot stratify class '{class}': {count} samples, at least 3 required")]
    Stratification { class: String, count: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined probability: {0}")]
    UndefinedProbability(String),

    #[error("non-finite value after {0}")]
    NonFinite(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
