use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Usage(_) => "usage",
            Error::NonFinite(_) => "numeric",
            Error::Truncated { .. } => "io",
            Error::Io(_) => "io",
        }
    }
}

impl Error {
    /// The message without its category prefix.
    pub fn reason(&self) -> String {
        match self {
            Error::Dimension(m)
            | Error::Config(m)
            | Error::State(m)
            | Error::Data(m)
            | Error::Format(m)
            | Error::Usage(m) => m.clone(),
            Error::NonFinite(op) => format!("non-finite value produced by {op}"),
            Error::Truncated { offset, needed } => {
                format!("truncated input at byte offset {offset}: needed {needed} more bytes")
            }
            Error::Io(e) => e.to_string(),
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
