use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Geometry(#[from] geofuse_core::Error),
    #[error(transparent)]
    Model(#[from] geofuse_nn::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

impl WorkbenchError {
    /// Process exit code for the CLI: 2 usage or config, 3 data, 4 check.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkbenchError::Spec(_) | WorkbenchError::Config(_) => 2,
            WorkbenchError::Check(_) => 4,
            WorkbenchError::Model(geofuse_nn::Error::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }
}
