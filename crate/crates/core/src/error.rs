use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("class `{0}` has no examples")]
    EmptyClass(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("model contains a FiLM layer but no conditioning was supplied")]
    MissingConditioning,

    #[error("backward called before forward")]
    NoCache,

    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),

    #[error("regime violation: {0}")]
    RegimeViolation(String),

    #[error("threshold {epsilon} is outside ({lower}, 1)")]
    InvalidThreshold { epsilon: f64, lower: f64 },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("all tail values are equal to {0}")]
    DegenerateTail(f64),

    #[error("tail holds {0} values, at least 3 are needed")]
    TailTooSmall(usize),

    #[error("class {0} has no correctly classified training examples")]
    UnfittableClass(usize),

    #[error("openmax model is not fitted")]
    NotFitted,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("pipeline mismatch: {0}")]
    PipelineMismatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
