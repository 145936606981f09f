use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input data.
    #[error("{0}")]
    Parse(String),
    /// Bad config, missing input path, or an infeasible simulator scene.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    EmptyEvaluation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Config(_) => 3,
            CliError::EmptyEvaluation(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
