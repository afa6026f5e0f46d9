use std::path::PathBuf;

use dp_sumquery::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Runtime(_) | Self::Write { .. } => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter { .. } | CoreError::Alignment { .. } => Self::Config(e.to_string()),
            CoreError::OutOfDomain { .. } => Self::Data(e.to_string()),
            CoreError::DimensionMismatch { .. } | CoreError::Singular => Self::Runtime(e.to_string()),
        }
    }
}
