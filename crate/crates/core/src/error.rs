use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MulteeError>;

#[derive(Debug, Error)]
pub enum MulteeError {
    #[error("text is empty or whitespace-only")]
    EmptyText,
    #[error("answer `{answer}` not found in `{text}`")]
    SpanNotFound { text: String, answer: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid example: {0}")]
    Validation(String),
    #[error("cannot generate synthetic data: {0}")]
    Generation(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl MulteeError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        MulteeError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable tag for the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            MulteeError::EmptyText => "EmptyText",
            MulteeError::SpanNotFound { .. } => "SpanNotFound",
            MulteeError::Parse { .. } => "ParseError",
            MulteeError::Validation(_) => "ValidationError",
            MulteeError::Generation(_) => "GenerationError",
            MulteeError::Index(_) => "IndexError",
            MulteeError::Shape(_) => "ShapeError",
            MulteeError::Config { .. } => "ConfigError",
            MulteeError::Checkpoint(_) => "CheckpointError",
            MulteeError::Io(_) => "IoError",
            MulteeError::Json(_) => "JsonError",
            MulteeError::Csv(_) => "CsvError",
            MulteeError::Image(_) => "ImageError",
        }
    }
}
