use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Input schema does not match the declared column layout.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid configuration or parameter value.
    #[error("config error: {0}")]
    Config(String),

    /// Shapes of matrices/vectors do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Local optimization produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
