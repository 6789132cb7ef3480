use std::fmt;
use std::io;

/// Crate-wide error type. Validation failures carry a message naming the
/// violated constraint so callers (and the CLI) can surface it verbatim.
#[derive(Debug)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    InvalidArgument(String),
    /// An internal consistency requirement failed (e.g. a covariance that
    /// must be positive semi-definite was not).
    InvalidState(String),
    /// Training produced a non-finite loss or gradient.
    TrainingDiverged { step: usize },
    /// Numerical integration produced a non-finite state.
    DivergedTrajectory { step: usize },
    /// A file could not be parsed; `line` is 1-based when known.
    Format { path: String, line: usize, msg: String },
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidState(msg) => write!(f, "invalid state: {msg}"),
            Error::TrainingDiverged { step } => {
                write!(f, "training diverged (non-finite loss) at step {step}")
            }
            Error::DivergedTrajectory { step } => {
                write!(f, "integration diverged (non-finite state) at step {step}")
            }
            Error::Format { path, line, msg } => {
                if *line > 0 {
                    write!(f, "{path}:{line}: {msg}")
                } else {
                    write!(f, "{path}: {msg}")
                }
            }
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

/// Shorthand for `Error::InvalidArgument` with format args.
macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

macro_rules! invalid_state {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidState(format!($($arg)*))
    };
}

pub(crate) use {invalid_arg, invalid_state};
