use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
