use thiserror::Error;

/// Command failure with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<dlsc::Error> for CliError {
    fn from(e: dlsc::Error) -> Self {
        use dlsc::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Usage(_) => CliError::Config(msg),
            E::Divergence { .. } => CliError::Divergence(msg),
            E::Format { .. } | E::Parse { .. } | E::Dimension(_) | E::Domain(_) | E::Io { .. } => CliError::Data(msg),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}
