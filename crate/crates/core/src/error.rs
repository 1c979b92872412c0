use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while loading, validating or analysing a market case.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid {what}: {message}")]
    Validation { what: &'static str, message: String },

    #[error("network is not connected: bus {0} cannot be reached")]
    Disconnected(u32),

    #[error("unknown bus {0}")]
    UnknownBus(u32),

    #[error("bus {to} is unreachable from bus {from}")]
    Unreachable { from: u32, to: u32 },

    #[error("injections are not balanced: residual {residual:.6} MW exceeds {tolerance:.6} MW")]
    Imbalance { residual: f64, tolerance: f64 },

    #[error("{policy} policy requires {missing}")]
    MissingDependency {
        policy: &'static str,
        missing: &'static str,
    },

    #[error("market is infeasible: {0}")]
    Infeasible(String),

    #[error("{what} did not converge: residual {residual:e} after {iterations} iterations")]
    NotConverged {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("target {target} is out of range, achievable interval is [{low}, {high}]")]
    OutOfRange { target: f64, low: f64, high: f64 },
}

impl Error {
    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
