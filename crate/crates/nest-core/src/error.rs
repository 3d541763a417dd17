use thiserror::Error;

#[derive(Debug, Error)]
pub enum NestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token store and corpus out of sync: {0}")]
    CorpusDesync(String),

    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl NestError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        NestError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        NestError::Format(message.into())
    }
}

pub type Result<T> = std::result::Result<T, NestError>;
