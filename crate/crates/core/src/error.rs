use residiff_codec::CodecError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("schedule construction failed: {0}")]
    Construction(String),
    #[error("not enough residual samples for lambda {lambda}: {found} < {required}")]
    InsufficientSamples {
        lambda: f64,
        found: usize,
        required: usize,
    },
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("threshold table error: {0}")]
    ThresholdTable(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
