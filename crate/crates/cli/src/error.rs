//! Command-line error taxonomy and the stable exit-code contract.
//!
//! Exit codes are part of the scripting interface: 0 success, 2 config
//! error, 3 data error, 4 numerical divergence. Failed checks (a gradient
//! check over tolerance, a rerun that did not reproduce) exit 1.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    /// An IO failure on a file, tagged with its path. Everything the tool
    /// reads or writes besides the config file counts as data.
    pub fn io(path: &std::path::Path, err: std::io::Error) -> CliError {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    pub fn config_io(path: &std::path::Path, err: std::io::Error) -> CliError {
        CliError::Config(format!("{}: {err}", path.display()))
    }
}

/// Library errors map on their kind: bad settings are config errors, bad
/// inputs are data errors, non-finite numbers are divergence. Callers that
/// know better (for example training, where a `DomainError` means the run
/// blew up rather than a bad setting) remap at the call site.
impl From<dsn_core::Error> for CliError {
    fn from(err: dsn_core::Error) -> CliError {
        use dsn_core::Error;
        match err {
            Error::Divergence { .. } => CliError::Divergence(err.to_string()),
            Error::InsufficientClassSamples { .. } => CliError::Data(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}

/// Remap for errors raised while a training loop is running: by that point
/// the configuration has been validated, so a domain error means the
/// numbers went bad, not the settings.
pub fn training_error(err: dsn_core::Error) -> CliError {
    use dsn_core::Error;
    match err {
        Error::Divergence { .. } | Error::DomainError { .. } => {
            CliError::Divergence(err.to_string())
        }
        other => other.into(),
    }
}

/// Resolves a path that must already exist, for a friendlier message than
/// the raw open error.
pub fn require_file(path: &PathBuf, role: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{role} not found at {}",
            path.display()
        )))
    }
}
