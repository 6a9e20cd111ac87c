//! Implementation of the `ldn` command-line tool. The binary is a thin clap
//! front end over the functions here.

pub mod bench;
pub mod commands;
pub mod config;

use std::fmt;

pub use config::{load_config, CliConfig};

/// A command failure together with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// A check ran and failed (exit 1).
    Check(String),
    /// Bad config, arguments, input or checkpoint (exit 2).
    Input(String),
    /// Training produced a non-finite value (exit 3).
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Divergence(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ldn_core::Error> for CliError {
    fn from(e: ldn_core::Error) -> Self {
        use ldn_core::Error as E;
        match e {
            E::Divergence(report) => CliError::Divergence(format!("training diverged: {report}")),
            E::Contract(_) => CliError::Check(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
