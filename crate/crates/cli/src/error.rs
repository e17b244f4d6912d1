use std::io;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config values or inputs; exit code 2.
    #[error("{0}")]
    Validation(String),

    /// Failure while running a valid request; exit code 3.
    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] rtf_forge::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 3,
        }
    }

    pub fn io(what: &str, e: io::Error) -> Self {
        CliError::Runtime(format!("{what}: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
