use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// configuration/contract/data problems are validation failures (1),
/// `Numeric` is a numeric failure (2).
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left}, right is {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
