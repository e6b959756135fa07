//! Error taxonomy shared by the whole pipeline.

use alloc::string::String;
use core::fmt;

/// Failure categories surfaced by core operations.
///
/// The split mirrors how callers react: `Dimension` and `Input` are caller
/// bugs or bad data, `Ingestion` is a malformed or missing external resource,
/// `Config` is an invalid configuration, and `Numeric` is a runtime numeric
/// failure (non-finite values) that should abort the current step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor or map shapes do not satisfy an operation's contract.
    Dimension(String),
    /// An input value violates a precondition (empty prompt, NaN pixel, ...).
    Input(String),
    /// A dataset or resource could not be ingested.
    Ingestion(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Non-finite values or other numeric failures at runtime.
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Ingestion(msg) => write!(f, "ingestion error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

/// Shorthand constructors; `dim_err!("got {x}")` reads better at call sites
/// than spelling out the enum path and `format!` every time.
#[macro_export]
macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}

#[macro_export]
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}

#[macro_export]
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}

#[macro_export]
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($arg)*)) };
}

#[macro_export]
macro_rules! ingest_err {
    ($($arg:tt)*) => { $crate::error::Error::Ingestion(alloc::format!($($arg)*)) };
}
