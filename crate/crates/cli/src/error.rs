//! Error type for the I/O layer and its mapping to process exit codes.

use std::fmt;

/// Pipeline-level error. Validation failures exit with code 1, I/O and
/// file-format failures with code 2.
#[derive(Debug)]
pub enum CliError {
    Validation(urbanseg_core::Error),
    Format(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn format(msg: impl Into<String>) -> Self {
        CliError::Format(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Format(_) | CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(e) => write!(f, "validation error: {e}"),
            CliError::Format(msg) => write!(f, "format error: {msg}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<urbanseg_core::Error> for CliError {
    fn from(e: urbanseg_core::Error) -> Self {
        CliError::Validation(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
