use std::path::PathBuf;

use thiserror::Error;

use crate::model::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expression error in `{field}`: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },

    #[error("coefficient evaluation failed: {0}")]
    Eval(#[from] EvalError),

    /// The model violates a structural assumption (shape mismatch, K not
    /// positive definite, missing flag for an unbounded family, ...).
    #[error("model rejected: {0}")]
    Model(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A state or weight became non-finite during time stepping.
    #[error("numerical abort at step {step}{}: {reason}", particle.map(|p| format!(", particle {p}")).unwrap_or_default())]
    NumericalAbort {
        step: usize,
        particle: Option<usize>,
        reason: String,
    },

    /// A post-condition failed (PSD check, stability limit, centering).
    #[error("numerical check failed: {0}")]
    Check(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn abort(step: usize, reason: impl Into<String>) -> Self {
        Error::NumericalAbort {
            step,
            particle: None,
            reason: reason.into(),
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Model(_) | Error::Config(_) | Error::Json { .. } => 2,
            Error::Io { .. } => 2,
            Error::Eval(_) | Error::NumericalAbort { .. } | Error::Check(_) => 3,
        }
    }
}
