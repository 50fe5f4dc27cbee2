//! Batch front end: `simulate`, `sweep` and `table1`.

pub mod commands;
pub mod config;
pub mod output;

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Parse(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Init(_) => 3,
            CliError::Invariant(_) | CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<vhempc::Error> for CliError {
    fn from(e: vhempc::Error) -> Self {
        use vhempc::Error as E;
        match e {
            E::Initialization(_) | E::Precondition(_) | E::DesignFailure(_) | E::InfeasibleModel(_) => {
                CliError::Init(e.to_string())
            }
            E::DimensionMismatch { .. } | E::Contract(_) => CliError::Parse(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
