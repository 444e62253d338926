//! Command-line toolkit: corpus generation, training, the base codec,
//! enhancement, threshold fitting and analysis reports.

pub mod commands;
pub mod config;
pub mod eval;

use std::fmt;

/// Bad flags, configuration or input paths; the binary exits with code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Exit code for a failed command: 2 when any cause is a [`UsageError`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}
