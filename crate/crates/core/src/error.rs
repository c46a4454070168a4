use thiserror::Error;

/// Errors raised by the quantization, cache, evaluation and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid head layout: {0}")]
    InvalidLayout(String),

    #[error("Hadamard order {0} is not a power of two")]
    InvalidOrder(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input contains NaN or infinite values")]
    NonFiniteInput,

    #[error("nibble value {0} does not fit in 4 bits")]
    NibbleRange(u8),

    #[error("zero point {0} does not fit the sidecar; input range is too narrow relative to its offset")]
    ZeroPointOverflow(f64),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("{rows} samples cannot seed {clusters} distinct centroids")]
    TooFewSamples { rows: usize, clusters: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("page pool exhausted")]
    CapacityExceeded,

    #[error("unknown sequence {0}")]
    SequenceNotFound(u64),

    #[error("sequence has no cached tokens")]
    EmptySequence,

    #[error("method `{method}`: {reason}")]
    Config { method: String, reason: String },

    #[error("request needs {needed} KV tokens but the pool holds only {capacity}")]
    RequestTooLarge { needed: usize, capacity: usize },

    #[error("invalid workload: {0}")]
    Workload(String),

    #[error("malformed binary format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
