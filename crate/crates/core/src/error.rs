use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An op produced a non-finite value, or an input that makes the op undefined.
    #[error("numerical failure in `{op}`: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cell {cell} has no non-zero counts")]
    EmptyCell { cell: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index { what: &'static str, index: usize, len: usize },

    /// Recomputed embeddings disagree with the cached ones; the RNG bookkeeping is broken.
    #[error("replay mismatch at sample {sample}: max abs difference {diff:e} exceeds {tol:e}")]
    Replay { sample: usize, diff: f64, tol: f64 },

    #[error("infeasible memory plan: {0}")]
    Infeasible(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } | Error::DegenerateInput(_) => 2,
            Error::Replay { .. } => 3,
            _ => 1,
        }
    }
}
