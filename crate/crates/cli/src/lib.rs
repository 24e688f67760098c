//! Library behind the `emoter` executable. Each subcommand is a plain
//! function so tests and the acceptance harness can drive it in-process.

mod commands;
mod config;

pub use commands::{
    ablate, evaluate, gen, gradcheck, train, ttest_files, AblationReport, ArmResult, EvalSplit, GenArgs, TTestReport, TrainMetrics, TrainOutput,
};
pub use config::{DataConfig, RunConfig, SEED_ENV};

use emoter_core::Error;

/// Failure classes with fixed process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) | Error::Input(m) | Error::Parameter(m) => CliError::Config(m),
            Error::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Check(_) => 4,
            CliError::Core(Error::Format { .. }) => 3,
            CliError::Core(_) => 1,
        }
    }
}

/// Pretty JSON with a trailing newline; field order is fixed by the types.
pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(Error::Json(e)))?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &std::path::Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
