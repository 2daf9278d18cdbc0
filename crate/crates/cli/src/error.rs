use aclrec_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 1,
                CoreError::Divergence(_) => 3,
                _ => 2,
            },
        }
    }
}
