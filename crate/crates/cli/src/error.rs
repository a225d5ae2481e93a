use std::io::ErrorKind;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gaitpt::Error),

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for a failed gradient check, 2 for usage and configuration
    /// problems, 3 for data and protocol problems, 4 for internal faults.
    pub fn exit_code(&self) -> u8 {
        use gaitpt::Error as E;
        match self {
            CliError::GradCheck(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Usage(_) | E::Config(_) => 2,
                E::Io { source, .. } if source.kind() == ErrorKind::NotFound => 2,
                E::Input(_)
                | E::Protocol(_)
                | E::Format { .. }
                | E::Integrity(_)
                | E::Io { .. }
                | E::Sampling(_)
                | E::Statistics(_) => 3,
                E::Shape(_) | E::NumericInput(_) => 4,
            },
        }
    }
}
