//! Crate-wide error type. The CLI maps variants onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes, dtypes, or axes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value is outside its documented domain (t outside [0,1], condition
    /// outside declared ranges, empty input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage input (dataset, checkpoint, bias curve) is absent.
    /// Exit code 3.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// NaN or Inf produced where finite values are guaranteed. Exit code 4.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 missing dependency,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) => 2,
            Error::MissingDependency(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
