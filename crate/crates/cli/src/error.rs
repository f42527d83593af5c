use std::path::Path;

/// CLI failure, carrying the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or config (exit 1).
    #[error("{0}")]
    Usage(String),
    /// Unreadable or invalid data, missing upstream artifact (exit 2).
    #[error("{0}")]
    Data(String),
    /// Scoring backend failure (exit 3).
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    /// An upstream stage's output is missing.
    pub fn missing(path: &Path, producer: &str) -> Self {
        CliError::Data(format!("{} not found; run `refqual {producer}` first", path.display()))
    }
}

impl From<refqual::gateway::GatewayError> for CliError {
    fn from(e: refqual::gateway::GatewayError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e)
    }
}
