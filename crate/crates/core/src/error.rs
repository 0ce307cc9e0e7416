use std::path::PathBuf;

/// Error taxonomy shared by the whole crate. The CLI maps these onto exit
/// codes, so variants are grouped by what the caller did wrong rather than
/// by which module noticed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A function argument violates a precondition (shape mismatch, bad step
    /// index, non-descending chain, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Computation produced or would produce non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation was called on a value in the wrong state, e.g. a chain
    /// backward pass over a chain recorded without tapes.
    #[error("invalid state: {0}")]
    State(String),

    /// Malformed file contents; `line` is 1-based and counts the header.
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported checkpoint format: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
