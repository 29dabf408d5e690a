//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or layer received incompatible dimensions.
    Shape { context: String, detail: String },
    /// A computation produced NaN or infinity.
    NonFinite { context: String },
    /// Invalid configuration value.
    Config(String),
    /// Mask registry misuse: duplicate task, fingerprint mismatch, empty mask.
    Registry(String),
    /// Task id not known to the registry or classifier.
    UnknownTask(usize),
    /// Numerical failure (factorization breakdown, diverged training).
    Numeric(String),
    /// Operation called in the wrong state, e.g. predict before finalize.
    State(String),
    /// Dataset construction or validation problem.
    Data(String),
    /// Pruning produced an unusable mask.
    Pruning(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { context } => {
                write!(f, "non-finite value produced in {context}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Registry(msg) => write!(f, "mask registry: {msg}"),
            Error::UnknownTask(id) => write!(f, "unknown task id {id}"),
            Error::Numeric(msg) => write!(f, "numerical failure: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Data(msg) => write!(f, "dataset: {msg}"),
            Error::Pruning(msg) => write!(f, "pruning: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
