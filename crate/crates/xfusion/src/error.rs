use std::path::Path;

/// Failure of a command, split by who has to act on it.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, plan files, paths or checkpoints. Exit code 1.
    #[error("{0}")]
    User(String),
    /// A fault inside the pipeline itself. Exit code 2.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::User(format!("{}: {e}", path.display()))
    }
}

impl From<xfusion_core::Error> for CliError {
    fn from(e: xfusion_core::Error) -> Self {
        use xfusion_core::Error as E;
        match e {
            E::Config(_) | E::Checkpoint(_) | E::UnknownParameter(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(format!("metrics log: {e}"))
    }
}
