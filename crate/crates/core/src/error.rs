use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("{what} out of range; reachable interval is [{low:e}, {high:e}]")]
    OutOfRange {
        what: &'static str,
        low: f64,
        high: f64,
    },

    #[error("waveforms are not compatible: {0}")]
    Incompatible(String),

    #[error("undefined estimate: {0}")]
    UndefinedEstimate(String),

    #[error("ambiguous histogram peak at positions {first} and {second}")]
    AmbiguousPeak { first: usize, second: usize },

    #[error(
        "gate frequency {gate_hz:e} Hz is not an integer multiple of pulse rate {pulse_hz:e} Hz"
    )]
    DivisorMismatch { gate_hz: f64, pulse_hz: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Stable, machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Sampling(_) => "sampling",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::TooShort(_) => "too_short",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Incompatible(_) => "incompatible",
            Error::UndefinedEstimate(_) => "undefined_estimate",
            Error::AmbiguousPeak { .. } => "ambiguous_peak",
            Error::DivisorMismatch { .. } => "divisor_mismatch",
            Error::Config(_) => "config",
            Error::UnknownExperiment(_) => "unknown_experiment",
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
