use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("usage: {0}")]
    Usage(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// A precondition of a metric or loss was violated (e.g. unequal point counts for EMD).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at epoch {epoch}, step {step} (lr {lr:e}): {reason}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        lr: f64,
        reason: String,
        snapshot: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
