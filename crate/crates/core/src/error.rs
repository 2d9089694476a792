use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// configuration/validation problems exit 2, data-format problems exit 3,
/// dimension or checkpoint mismatches exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::DataFormat(_) | Error::Io(_) => 3,
            Error::DimMismatch(_) | Error::Checkpoint(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
