// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every analysis module.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading traces or running analyses.
#[derive(Debug, Error)]
pub enum Error {
    /// The container bytes or manifest could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// A structural invariant does not hold; `field` names the offending part.
    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// Tensor payload contains values the analyses cannot use.
    #[error("data error in `{field}`: {reason}")]
    Data { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad analysis or fixture configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller asked for something the operation does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// The input is well formed but the statistic is undefined on it.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn data(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that mean "the input traces are bad" rather than
    /// "the request was bad".
    pub fn is_validation_failure(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Validation { .. } | Error::Data { .. } | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
