use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Run(#[from] modmae::Error),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// A library error met while resolving the configuration.
    pub fn from_config(e: modmae::Error) -> Self {
        match e {
            modmae::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Config(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Run(_) | CliError::Failed(_) => 1,
        }
    }
}
