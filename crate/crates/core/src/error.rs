use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at byte {offset} ({field}): {message}")]
    Parse {
        offset: u64,
        field: String,
        message: String,
    },
    #[error("png error: {0}")]
    Png(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(offset: u64, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            field: field.into(),
            message: message.into(),
        }
    }
}
