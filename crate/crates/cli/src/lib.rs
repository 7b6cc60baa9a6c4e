//! Command implementations behind the `mfed` binary.

pub mod commands;
pub mod config;

use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const FAILURE: u8 = 1;
    /// Invalid configuration or usage.
    pub const CONFIG: u8 = 2;
    /// Training or the convex harness diverged.
    pub const DIVERGENCE: u8 = 3;
    /// The rate check ran but did not pass.
    pub const RATE_CHECK: u8 = 4;
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(code: u8, error: anyhow::Error) -> Self {
        Self { code, error }
    }

    pub fn config(error: anyhow::Error) -> Self {
        Self::new(exit::CONFIG, error)
    }

    pub fn context(self, ctx: String) -> Self {
        Self {
            code: self.code,
            error: self.error.context(ctx),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<mfed_core::Error> for CliError {
    fn from(e: mfed_core::Error) -> Self {
        let code = match e {
            mfed_core::Error::Divergence { .. } => exit::DIVERGENCE,
            _ => exit::FAILURE,
        };
        Self::new(code, e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(exit::FAILURE, e.into())
    }
}
