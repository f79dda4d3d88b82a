use thiserror::Error;

/// Errors raised by the simulator. Per-measurement conditions that a scan
/// must survive (saturation, open circuit) are reported through flags, not
/// through this type.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} out of range: {value}")]
    Domain { what: &'static str, value: String },

    #[error("short circuit: load impedance is zero")]
    ShortCircuit,

    #[error("THD undefined: fundamental amplitude is zero")]
    UndefinedThd,

    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),

    #[error("counts saturated ({0}); change mirror ratio or offset code")]
    OutOfRange(String),

    #[error("open circuit: demodulated magnitude is zero")]
    OpenCircuit,

    #[error("singular nodal system at line {line}")]
    Singular { line: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(what: &'static str, value: impl ToString) -> Error {
    Error::Domain {
        what,
        value: value.to_string(),
    }
}
