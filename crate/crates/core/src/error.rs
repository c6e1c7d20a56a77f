use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed structured text; line/column come from the JSON reader.
    #[error("{context}: parse error at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The inside probability of a training instance is exactly zero.
    #[error("degenerate instance {origin}: inside probability is zero")]
    Degenerate { origin: String },

    #[error("unparseable sequence {0}")]
    Unparseable(String),

    #[error(
        "enumeration budget exceeded: {needed} strings > budget {budget}; use a smaller max_len"
    )]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("incompatible artifact {path}: format version {found}, expected {expected}")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            context: path.display().to_string(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, err: serde_json::Error) -> Self {
        if err.is_io() {
            return Error::Io {
                context: context.into(),
                source: err.into(),
            };
        }
        Error::Parse {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// Process exit code: 2 for I/O and missing inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Dependency(_) => 2,
            _ => 1,
        }
    }
}
