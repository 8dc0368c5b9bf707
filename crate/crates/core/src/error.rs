use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step} (batch digest {batch_digest})")]
    NonFinite {
        step: u64,
        loss: f64,
        batch_digest: String,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{}: {source}", describe_location(path, *line))]
    Io {
        path: PathBuf,
        line: Option<usize>,
        #[source]
        source: std::io::Error,
    },
}

fn describe_location(path: &std::path::Path, line: Option<usize>) -> String {
    match line {
        Some(line) => format!("{}:{line}", path.display()),
        None => path.display().to_string(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            line: None,
            source,
        }
    }

    pub fn io_at_line(path: impl Into<PathBuf>, line: usize, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            line: Some(line),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 bad input, 3 usage, 4 corruption.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Precondition(_) => 3,
            Error::Corrupt(_) => 4,
            Error::NonFinite { .. } => 1,
            _ => 2,
        }
    }
}
