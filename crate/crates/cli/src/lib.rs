//! Pipeline orchestration behind the `oceanflow` binary.

pub mod config;
pub mod export;
pub mod pipeline;

use std::fmt;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const DIMENSION: i32 = 5;
    pub const NUMERIC: i32 = 6;
}

/// Exit-code table printed by `--help`.
pub const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  I/O error (missing or unwritable file)
  4  schema or format error (invalid config, malformed flowpack)
  5  dimension mismatch (grid or vector sizes disagree)
  6  numeric or range failure (rank out of range, singular system)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(exit::IO, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(exit::SCHEMA, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<oceanflow::Error> for CliError {
    fn from(e: oceanflow::Error) -> Self {
        use oceanflow::Error::*;
        let code = match &e {
            Io(_) => exit::IO,
            Format(_) | UnsupportedVersion(_) => exit::SCHEMA,
            DimensionMismatch(_) | InvalidGrid(_) => exit::DIMENSION,
            InvalidArgument(_) | OutOfRange(_) | NonFinite(_) | Numerical(_) => exit::NUMERIC,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::schema(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
