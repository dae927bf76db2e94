use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A caller-supplied value is outside the operation's domain.
    Argument(String),
    /// Internal bookkeeping disagrees with itself (cache, indices, window).
    Consistency(String),
    /// Input data is missing or insufficient.
    Input(String),
    /// A binary stream does not match its declared layout.
    Format { offset: u64, message: String },
    /// Training produced a non-finite loss.
    Training { iteration: usize, message: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn consistency(msg: impl Into<String>) -> Self {
        Error::Consistency(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Argument(m) => write!(f, "invalid argument: {m}"),
            Error::Consistency(m) => write!(f, "consistency error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Training { iteration, message } => {
                write!(f, "training failed at iteration {iteration}: {message}")
            }
        }
    }
}

impl core::error::Error for Error {}
