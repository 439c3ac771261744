use thiserror::Error;

/// Errors raised across the augmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("match error: {0}")]
    Match(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &str, expected: usize, got: usize) -> Error {
    Error::Shape(format!("{what}: expected {expected}, got {got}"))
}
