//! Command implementations behind the `wordlearn` binary.

pub mod commands;
pub mod config;
pub mod store;

use thiserror::Error;

pub use commands::{check_rows, run, Cli};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("store {0} is locked by another process (remove the lock file if that process is gone)")]
    Locked(String),

    #[error("{failed} acceptance check(s) failed")]
    CheckFailed { failed: usize },

    #[error(transparent)]
    Core(#[from] wordlearn::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use wordlearn::Error as E;
        match self {
            CliError::Config(_) | CliError::Locked(_) => EXIT_CONFIG,
            CliError::CheckFailed { .. } => EXIT_CHECK,
            CliError::Core(e) if e.is_format() => EXIT_FORMAT,
            CliError::Core(
                E::Config(_)
                | E::Domain(_)
                | E::UnknownLabel(_)
                | E::UnsupportedLabel(_)
                | E::NotReady { .. }
                | E::DuplicateLabel(_),
            ) => EXIT_CONFIG,
            CliError::Core(E::Io(_)) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}
