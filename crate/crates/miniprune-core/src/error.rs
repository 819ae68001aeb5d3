//! Error type shared across the toolkit.
//!
//! Errors fall into two broad classes that callers (notably the CLI) treat
//! differently: *input* problems (bad shapes, bad configs, unreadable files)
//! and *numerical* problems (non-finite losses, division guards tripping).

use std::fmt;

/// Unified error for every fallible operation in this crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// A tensor shape or dimension precondition was violated.
    Shape { message: String },
    /// A model / run configuration is internally inconsistent.
    Config { message: String },
    /// Corpus or batch construction problem (empty corpus, window too long, ...).
    Data { message: String },
    /// Filesystem problem while reading or writing an artifact.
    Io { message: String },
    /// A serialized artifact (manifest, plan, report) failed validation.
    Format { message: String },
    /// A numeric pipeline produced NaN or Inf; `context` names the stage.
    NonFinite { context: String },
    /// A perturbation element was too close to zero to divide by.
    DivisionGuard { context: String },
}

impl CoreError {
    pub fn shape(message: impl Into<String>) -> Self {
        CoreError::Shape { message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CoreError::Config { message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CoreError::Data { message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CoreError::Io { message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        CoreError::Format { message: message.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite { context: context.into() }
    }

    pub fn division_guard(context: impl Into<String>) -> Self {
        CoreError::DivisionGuard { context: context.into() }
    }

    /// True for errors caused by numeric breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::NonFinite { .. } | CoreError::DivisionGuard { .. }
        )
    }

    /// Same error with a caller-side prefix on the message (e.g. which
    /// perturbation sample or training step was running).
    pub fn with_context(self, ctx: impl fmt::Display) -> Self {
        let prefix = |m: String| format!("{ctx}: {m}");
        match self {
            CoreError::Shape { message } => CoreError::Shape { message: prefix(message) },
            CoreError::Config { message } => CoreError::Config { message: prefix(message) },
            CoreError::Data { message } => CoreError::Data { message: prefix(message) },
            CoreError::Io { message } => CoreError::Io { message: prefix(message) },
            CoreError::Format { message } => CoreError::Format { message: prefix(message) },
            CoreError::NonFinite { context } => CoreError::NonFinite { context: prefix(context) },
            CoreError::DivisionGuard { context } => {
                CoreError::DivisionGuard { context: prefix(context) }
            }
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { message } => write!(f, "shape error: {message}"),
            CoreError::Config { message } => write!(f, "config error: {message}"),
            CoreError::Data { message } => write!(f, "data error: {message}"),
            CoreError::Io { message } => write!(f, "io error: {message}"),
            CoreError::Format { message } => write!(f, "format error: {message}"),
            CoreError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            CoreError::DivisionGuard { context } => {
                write!(f, "division guard tripped in {context}")
            }
        }
    }
}

impl std::error::Error for CoreError {}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io { message: e.to_string() }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
