use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape { op: &'static str, detail: String },
    /// Input too close to zero for a norm or division.
    Degenerate { op: &'static str, detail: String },
    /// An operation produced NaN or infinity.
    NonFinite { op: &'static str },
    /// A caller-side precondition was violated.
    Contract(String),
    /// A configuration field is out of range.
    Config { field: String, detail: String },
    /// Sequence exceeds the decoder's positional table.
    Length { len: usize, max: usize },
    /// Gradient for a named parameter contains NaN or infinity.
    NonFiniteGradient { param: String },
    /// Training loss left the finite range or crossed the divergence bound.
    Divergence { step: u64, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Degenerate { op, detail } => write!(f, "degenerate input to {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config { field, detail } => write!(f, "invalid config field `{field}`: {detail}"),
            Error::Length { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}

pub(crate) fn config_err<T>(field: &str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        field: field.into(),
        detail: detail.into(),
    })
}
