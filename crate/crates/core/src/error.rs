use std::path::PathBuf;

use elicit_autodiff::AutodiffError;
use thiserror::Error;

use crate::initializer::InitDiagnostics;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid input: configuration, expert data, files.
    Validation,
    /// A run produced non-finite values or hit a numerical domain error.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{location}`: {message}")]
    Config { location: String, message: String },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("domain error in {what}: {detail}")]
    Domain { what: String, detail: String },

    #[error("non-finite {quantity} at epoch {epoch} in `{key}`")]
    NonFinite {
        epoch: usize,
        key: String,
        quantity: &'static str,
        /// Hyperparameter values (constrained) from the last finite epoch.
        last_finite: Vec<(String, f64)>,
    },

    #[error("initialization failed: all {} candidates produced non-finite losses", .diagnostics.init_loss_list.len())]
    Initialization { diagnostics: Box<InitDiagnostics> },

    #[error("cannot access {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {origin} at `{location}`: {message}")]
    Json {
        origin: String,
        location: String,
        message: String,
    },

    #[error("bundle format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("bundle checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn domain(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Domain {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::Initialization { .. } | Error::Domain { .. } => {
                ErrorKind::Numerical
            }
            Error::Autodiff(AutodiffError::Domain { .. }) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    /// Short machine-readable tag for one-line error reports.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Autodiff(AutodiffError::Domain { .. }) | Error::Domain { .. } => "domain",
            Error::Autodiff(_) => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::Initialization { .. } => "initialization",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::FormatVersion { .. } => "format-version",
            Error::Checksum { .. } => "checksum",
            Error::Csv(_) => "csv",
        }
    }

    /// Prefixes the location of a configuration error with `prefix`.
    pub(crate) fn within(self, prefix: &str) -> Self {
        match self {
            Error::Config { location, message } => Error::Config {
                location: if location.is_empty() {
                    prefix.to_string()
                } else {
                    format!("{prefix}.{location}")
                },
                message,
            },
            other => other,
        }
    }
}
