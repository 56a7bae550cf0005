use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotor {index} speed {speed} outside [0, {max}] rad/s")]
    RotorSpeedOutOfRange { index: usize, speed: f64, max: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported fault configuration: {0}")]
    UnsupportedMask(String),

    #[error("arity mismatch: expected {expected} outputs, found {found}")]
    Arity { expected: usize, found: usize },

    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("window not ready at step {step}: first legal step is {first_legal}")]
    WindowNotReady { step: u64, first_legal: u64 },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unknown scenario {0:?}; expected one of 4prop, 3prop, 2prop-opposing")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
