use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("checkpoint format error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error(transparent)]
    Geometry(#[from] geofuse_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
