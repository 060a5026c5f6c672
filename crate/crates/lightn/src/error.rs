use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} with shapes {lhs} and {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
