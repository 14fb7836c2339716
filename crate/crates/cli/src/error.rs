// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// A run diverged.
pub const EXIT_DIVERGED: i32 = 1;
/// Bad configuration, arguments, or output location.
pub const EXIT_CONFIG: i32 = 2;
/// An invariant suite failed.
pub const EXIT_CHECKS: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("line {line}: {key}: {message}")]
    Parse { line: usize, key: String, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{method} diverged at round {round} (seed {seed})")]
    Diverged { method: String, seed: u64, round: usize },
    #[error("{0}")]
    Checks(String),
    #[error(transparent)]
    Core(#[from] fedsc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::Checks(_) => EXIT_CHECKS,
            CliError::Parse { .. } | CliError::Config(_) | CliError::Core(_) | CliError::Io { .. } => EXIT_CONFIG,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
