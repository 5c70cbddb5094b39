use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("argument out of range: {0}")]
    Argument(String),

    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
