use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing prerequisite `{}`: {hint}", path.display())]
    Missing { path: PathBuf, hint: String },
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: surfnet::Error },
    #[error(transparent)]
    Core(#[from] surfnet::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status by failure category.
    pub fn exit_code(&self) -> i32 {
        use surfnet::Error as E;
        let core = match self {
            CliError::Config(_) => return 2,
            CliError::Missing { .. } => return 3,
            CliError::Io { .. } => return 4,
            CliError::File { source, .. } | CliError::Core(source) => source,
        };
        match core {
            E::Domain(_) | E::Shape(_) => 2,
            E::State(_) => 3,
            E::Io(_) => 4,
            E::Parse { .. } | E::Format(_) => 5,
            E::NoSolution { .. } | E::Convergence { .. } | E::Coverage { .. } | E::Generation(_) => 6,
            E::Numeric { .. } | E::Divergence { .. } => 7,
        }
    }
}
