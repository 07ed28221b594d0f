//! Command-line front end for `ossfield`: configuration, simulation runs,
//! verification suites, persistence and plot-ready tables.
//!
//! Exit codes: 0 success or pass, 1 verification failure, 2 invalid
//! configuration or arguments, 3 field not defined, 4 I/O failure.

pub mod config;
pub mod manifest;
pub mod persist;
pub mod plotdata;
pub mod simulate;
pub mod suites;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("field undefined: {0}")]
    Undefined(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Undefined(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ossfield::Error> for CliError {
    fn from(e: ossfield::Error) -> Self {
        use ossfield::Error as E;
        match e {
            E::FieldUndefined(_) | E::IntegrandSingularity(_) | E::ExpOverflow => CliError::Undefined(e.to_string()),
            E::Hypothesis(msg) => CliError::Config(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Result of a command that completed without an error.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    /// Name of the failing check when `pass` is false.
    pub failing_check: Option<String>,
    pub out_dir: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}
