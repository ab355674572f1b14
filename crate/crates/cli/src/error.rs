use thiserror::Error;

/// CLI failures. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config:{field}: {message}")]
    Config { field: String, message: String },
    #[error("missing-stage:{0}")]
    MissingStage(String),
    #[error("no-results")]
    NoResults,
    #[error("diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] frisbi::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingStage(_) | CliError::Core(frisbi::Error::MissingDependency(_)) => 3,
            CliError::Diverged(_) | CliError::Core(frisbi::Error::Diverged(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
