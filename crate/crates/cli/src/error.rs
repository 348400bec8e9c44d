use std::process::ExitCode;

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0:#}")]
    Data(anyhow::Error),
    #[error("numerical failure: {0:#}")]
    Numerical(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }
}

impl From<uhpnet::Error> for CliError {
    fn from(e: uhpnet::Error) -> Self {
        // Core messages already include their causes.
        let flat = anyhow::anyhow!(e.to_string());
        match e {
            uhpnet::Error::Numerical(_)
            | uhpnet::Error::Diverged { .. }
            | uhpnet::Error::Tensor(_) => CliError::Numerical(flat),
            _ => CliError::Data(flat),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}
