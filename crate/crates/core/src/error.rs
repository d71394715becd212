use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Two operands (or an operand and a layer) disagree on shape.
    Dimension { op: &'static str, message: String },
    /// A caller broke an operation's precondition.
    Contract(String),
    /// A non-finite value appeared where a finite one is required.
    Numeric(String),
    /// Invalid configuration value, key or combination.
    Config(String),
    /// Malformed file contents; `offset` is the byte position of the fault.
    Format { offset: u64, message: String },
    Io(std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, message: impl Into<String>) -> Self {
        Error::Dimension { op, message: message.into() }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, message } => write!(f, "dimension error in {op}: {message}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
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
