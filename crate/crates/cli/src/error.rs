use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] qcomp::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("provenance check failed: {0}")]
    Provenance(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config, 3 hash or provenance, 4 numeric, 5 protocol.
    pub fn exit_code(&self) -> i32 {
        use qcomp::Error as E;
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Provenance(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Range(_) | E::Format(_) | E::Io(_) => 2,
                E::Shape(_) | E::Numeric { .. } => 4,
                E::Protocol { .. } => 5,
            },
        }
    }
}
