use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("rejected record at row {row}: {reason}")]
    RejectedRecord { row: usize, reason: String },

    #[error("no records: cannot derive a tree shape")]
    EmptyRecords,

    #[error("topology error: {0}")]
    Topology(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter(_) | Error::Schema(_) | Error::Config(_) => {
                ErrorCategory::Config
            }
            Error::RejectedRecord { .. }
            | Error::EmptyRecords
            | Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::Topology(_) | Error::Numerical(_) => ErrorCategory::Internal,
        }
    }
}
