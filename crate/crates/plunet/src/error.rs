//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor dimensions incompatible with the requested operation.
    Shape(String),
    /// Invalid operation or block specification (bad stride, groups, ...).
    Spec(String),
    /// Architecture or training configuration rejected.
    Config(String),
    /// Byte-level file format violation (tensor, checkpoint, image).
    Format(String),
    /// Dataset problem: missing mask, non-binary mask, empty set.
    Data(String),
    /// Training-time failure such as a non-finite loss.
    Train(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Spec(m) => write!(f, "spec error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Train(m) => write!(f, "train error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail_shape {
    ($($arg:tt)*) => { return Err($crate::error::Error::Shape(format!($($arg)*))) };
}
macro_rules! bail_spec {
    ($($arg:tt)*) => { return Err($crate::error::Error::Spec(format!($($arg)*))) };
}

pub(crate) use bail_shape;
pub(crate) use bail_spec;
