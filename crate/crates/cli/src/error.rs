use thiserror::Error;

/// Failures surfaced by the runner, split by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// A run started but could not finish (exit code 1).
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<con2em::Error> for CliError {
    fn from(e: con2em::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
