//! Crate-wide error type.
//!
//! Variants are grouped by how a caller should react: `Shape`, `Parameter`,
//! `Contract`, and `Config` are caller mistakes, `Numeric`, `NonConvergence`,
//! and `DegenerateLabels` are runtime computation failures, and `Io` wraps
//! filesystem problems with the offending path attached.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation parameter (stride, padding, ratio, ...) is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An API contract was violated, e.g. backward from a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or key/value override is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced non-finite values or left its domain.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative solver failed to make progress.
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    /// Labels are unusable for classification (e.g. a single class).
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// Filesystem failure, with the path that caused it.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an io::Error with path context.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 1 usage/config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Shape(_)
            | Error::Parameter(_)
            | Error::Contract(_)
            | Error::Config(_) => 1,
            Error::Numeric(_) | Error::NonConvergence(_) | Error::DegenerateLabels(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
