//! Error type shared by every module in the crate.
//!
//! All fallible operations return [`Result`]. Variants carry enough context
//! to name the offending quantity; callers that need process exit codes map
//! variants to codes themselves (this crate assigns none).

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong in this crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor was built or used with inconsistent shape information.
    ShapeMismatch {
        /// What the caller was doing.
        context: &'static str,
        /// Human-readable description of the mismatch.
        detail: String,
    },
    /// A layer or network was configured with invalid hyperparameters.
    InvalidConfig {
        /// Which knob is broken and why.
        detail: String,
    },
    /// A backward pass was handed a cache that does not belong to the
    /// forward pass it claims to come from.
    CacheMismatch {
        /// Which layer rejected the cache.
        detail: String,
    },
    /// No identity map exists for the requested insertion point.
    IdentityInsertionImpossible {
        /// Why the insertion cannot preserve the function.
        detail: String,
    },
    /// A dataset operation asked for more samples than a class contains.
    InsufficientClassSamples {
        /// Class label whose population ran out.
        class: usize,
        /// Samples available for that class.
        have: usize,
        /// Samples requested per class.
        need: usize,
    },
    /// The objective stopped being finite during training.
    Divergence {
        /// Epoch index at which the blow-up was detected.
        epoch: usize,
        /// Optimizer step within the run.
        step: u64,
        /// The non-finite value that triggered the error.
        value: f64,
    },
    /// A numeric argument is outside its documented domain.
    DomainError {
        /// Which argument and what domain was violated.
        detail: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::InvalidConfig { detail } => write!(f, "invalid configuration: {detail}"),
            Error::CacheMismatch { detail } => write!(f, "forward cache mismatch: {detail}"),
            Error::IdentityInsertionImpossible { detail } => {
                write!(f, "identity insertion impossible: {detail}")
            }
            Error::InsufficientClassSamples { class, have, need } => write!(
                f,
                "class {class} has only {have} samples, {need} requested"
            ),
            Error::Divergence { epoch, step, value } => write!(
                f,
                "objective diverged at epoch {epoch}, step {step}: value {value}"
            ),
            Error::DomainError { detail } => write!(f, "domain error: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
