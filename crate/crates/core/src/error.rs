use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("basis index {index} out of range for {count} coefficients")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("spline parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("invalid spline: {0}")]
    InvalidSpline(String),
    #[error("{points} points cannot determine {free} free coefficients")]
    Underdetermined { points: usize, free: usize },
    #[error("singular least-squares system")]
    Singular,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown maneuver id {0}")]
    UnknownManeuver(usize),
    #[error("cannot reconstruct scenario: {0}")]
    Reconstruction(String),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
