//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

/// Errors produced by the library.
///
/// Validation problems (bad shapes, bad parameters, malformed files) are
/// separated from I/O failures so the CLI can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// `true` for errors caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Truncated(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
