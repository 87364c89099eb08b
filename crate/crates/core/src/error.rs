use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the solver.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration; the message names the field.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shapes, empty inputs, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or divergence during simulation or training.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unreadable, truncated or version-mismatched checkpoint file.
    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Contract(_) | Error::Numerical(_) => 2,
            Error::Io { .. } | Error::Checkpoint { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
