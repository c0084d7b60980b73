//! Error classification for process exit codes.

use std::fmt;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;
pub const EXIT_THRESHOLD: u8 = 4;

/// An error tagged with the exit code it should produce.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    pub fn config(msg: impl fmt::Display) -> Self {
        Failure { code: EXIT_CONFIG, error: anyhow::anyhow!("{msg}") }
    }

    pub fn threshold(msg: impl fmt::Display) -> Self {
        Failure { code: EXIT_THRESHOLD, error: anyhow::anyhow!("{msg}") }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches an exit class and a context line to any error.
pub trait Classify<T> {
    fn config_err(self, context: impl fmt::Display) -> CliResult<T>;
    fn stage_err(self, stage: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure { code: EXIT_CONFIG, error: e.into().context(context.to_string()) })
    }

    fn stage_err(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| Failure { code: EXIT_STAGE, error: e.into().context(format!("stage '{stage}' failed")) })
    }
}
