use alloc::string::String;
use core::fmt;

/// Errors raised by the engine and the model layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes disagree; `axis` names the offending dimension when one exists.
    Dimension {
        op: &'static str,
        axis: Option<usize>,
        detail: String,
    },
    /// Invalid hyper-parameters or structural configuration.
    Config(String),
    /// Input data violates a value contract (non-finite, out of range, bad label).
    Data(String),
    /// API misuse, e.g. backward on a non-scalar or fusing twice.
    Usage(String),
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension {
                op,
                axis: Some(axis),
                detail,
            } => write!(f, "dimension error in {op} at axis {axis}: {detail}"),
            Error::Dimension {
                op,
                axis: None,
                detail,
            } => write!(f, "dimension error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, axis: Option<usize>, detail: String) -> Error {
    Error::Dimension { op, axis, detail }
}
