use thiserror::Error;

/// Errors raised across the laboratory.
///
/// Variants fall into two families: validation problems (bad shapes, bad
/// configuration, malformed inputs) and runtime failures (I/O, capacity).
/// [`Error::is_validation`] tells them apart for exit-code mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by the caller's inputs rather than the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Config(_)
                | Error::InvalidExample(_)
                | Error::Input(_)
                | Error::Format { .. }
                | Error::UndefinedCorrelation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
