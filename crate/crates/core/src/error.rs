use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration; `key` names the offending entry.
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    /// Two computations that must agree did not. Indicates a bug.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// A gradient or objective value became non-finite.
    #[error("numerical abort at step {step}: {message}")]
    NonFinite { step: usize, message: String },

    /// Every prompt in the curriculum pool has been filtered out.
    #[error("prompt pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 usage/config, 2 numerical, 3 pool exhausted.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Consistency(_) => 2,
            Error::PoolExhausted(_) => 3,
            _ => 1,
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
