use thiserror::Error;

/// Errors raised anywhere in the evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("action index {index} out of range (action count {count})")]
    ActionOutOfRange { index: usize, count: usize },

    #[error("observation index {index} out of range (observation count {count})")]
    ObservationOutOfRange { index: usize, count: usize },

    #[error("state index {index} out of range (state count {count})")]
    StateOutOfRange { index: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infinite horizon requires gamma < 1 (got {0})")]
    InfiniteHorizonUndiscounted(f64),

    #[error("policy snapshot {0} not present in transcript")]
    MissingSnapshot(u32),

    #[error("checkpoint deviation {0} has not been resolved against a transcript")]
    UnresolvedCheckpoint(u32),

    #[error("step {t}: behavior probability {prob} below softness floor {floor}")]
    BelowFloor { t: u64, prob: f64, floor: f64 },

    #[error("transcript has {available} steps, {required} required")]
    InsufficientData { available: usize, required: usize },

    #[error("environment {0} does not support exact enumeration")]
    NotEnumerable(String),

    #[error("enumeration depth {depth} exceeds guard {guard}")]
    DepthGuard { depth: usize, guard: usize },

    #[error("transcript does not match environment: {0}")]
    Mismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown identifier: {0}")]
    UnknownId(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// `true` for I/O failures, `false` for everything the caller could fix
    /// by changing its input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Parse(e.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
