use std::path::PathBuf;

/// Failures of the driver, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Bad arguments, unreadable or invalid configuration.
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] htrmrl_core::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Io { .. } | AppError::Runtime(_) | AppError::Core(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            context: path.into().display().to_string(),
            source,
        }
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Runtime(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Runtime(format!("json: {e}"))
    }
}

pub type AppResult<T> = Result<T, AppError>;
