//! Crate-wide error type.

use std::fmt;

/// All failure modes surfaced by this crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent with an operation's contract.
    Shape(String),
    /// An argument violates a precondition (ranges, flags, counts).
    Arg(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file's contents violate its format (magic, lengths, tokens).
    Format(String),
    /// A run configuration is invalid or inconsistent.
    Config(String),
    /// A numerical failure: non-finite loss, failed gradient check.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Arg(m) => write!(f, "argument error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl Error {
    /// Process exit code class for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Arg(_) => 1,
            Error::Io(_) | Error::Format(_) => 2,
            Error::Shape(_) | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
