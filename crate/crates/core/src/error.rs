use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("corrupt container {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SchemaVersion { .. } => 2,
            Error::Numerical(_) => 4,
            Error::Shape(_) | Error::Data(_) | Error::Corrupt { .. } | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
