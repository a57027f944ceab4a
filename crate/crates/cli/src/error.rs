use std::fmt;
use std::path::Path;

use mlgem_core::Error as CoreError;

/// Failure classes that map one-to-one onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Convergence(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn invalid(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Validation(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Convergence(m) => write!(f, "did not converge: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Glasso { .. }
            | CoreError::Fold { .. }
            | CoreError::AllGridPointsFailed(_) => CliError::Convergence(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
