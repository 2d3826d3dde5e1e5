use std::path::{Path, PathBuf};

use evoedit_core::Error as CoreError;

/// Errors surfaced by commands. Each class maps to its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(CoreError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub mod exit_code {
    pub const OTHER: u8 = 1;
    /// Command-line usage errors, reported by the argument parser.
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const DIVERGENCE: u8 = 5;
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit_code::CONFIG,
            CliError::Data(_) => exit_code::DATA,
            CliError::Divergence(_) => exit_code::DIVERGENCE,
            CliError::Io { .. } => exit_code::OTHER,
            CliError::Core(e) => match e {
                CoreError::Config(_) => exit_code::CONFIG,
                CoreError::Divergence(_) => exit_code::DIVERGENCE,
                CoreError::Schema(_)
                | CoreError::EmptyEdit
                | CoreError::DegenerateEdit { .. }
                | CoreError::SequenceTooLong { .. }
                | CoreError::Index { .. } => exit_code::DATA,
                CoreError::Dimension { .. } | CoreError::Contract(_) => exit_code::OTHER,
            },
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<evoedit_core::engine::StreamError> for CliError {
    fn from(e: evoedit_core::engine::StreamError) -> Self {
        let step = format!("edit {} (step {})", e.index, e.index + 1);
        match e.error {
            CoreError::Divergence(m) => CliError::Divergence(format!("{step}: {m}")),
            CoreError::Config(m) => CliError::Config(format!("{step}: {m}")),
            CoreError::Contract(m) => CliError::Core(CoreError::Contract(format!("{step}: {m}"))),
            other @ CoreError::Dimension { .. } => CliError::Core(other),
            other => CliError::Data(format!("{step}: {other}")),
        }
    }
}
