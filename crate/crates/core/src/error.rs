use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Dim(String),
    /// A scalar argument is outside its valid domain (e.g. `tau <= 0`).
    Domain(String),
    /// Input is degenerate for the requested computation (e.g. a constant
    /// weight vector has no usable standard deviation).
    Degenerate(String),
    /// Configuration is inconsistent (bad spec, mismatched checkpoint, ...).
    Config(String),
    /// A file does not follow its declared format. `offset` points at the
    /// first offending byte when known.
    Format { msg: String, offset: Option<u64> },
    /// Stored data fails its integrity check (truncation, checksum).
    Integrity(String),
    /// Invalid invocation of a reporting or CLI entry point.
    Usage(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format { msg: msg.into(), offset }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format { msg, offset: Some(o) } => {
                write!(f, "format error at byte {o}: {msg}")
            }
            Error::Format { msg, offset: None } => write!(f, "format error: {msg}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
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
