use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ClanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ClanError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller broke an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
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

impl ClanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClanError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        ClanError::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    ///
    /// 2 = bad input, 3 = numeric failure, 4 = invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClanError::Numeric(_) => 3,
            ClanError::Invariant(_) | ClanError::Contract(_) | ClanError::Shape(_) => 4,
            _ => 2,
        }
    }
}
