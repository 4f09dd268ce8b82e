use thiserror::Error;

/// Errors raised by the tensor engine, the attention layers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("axis `{axis}` has size {left} in one operand and {right} in another")]
    AxisSizeMismatch {
        axis: String,
        left: usize,
        right: usize,
    },
    #[error("axis `{0}` not found")]
    AxisNotFound(String),
    #[error("axis `{0}` appears more than once")]
    DuplicateAxis(String),
    #[error("einsum needs at least one operand")]
    EmptyOperands,
    #[error("operand has {rank} axes but {labels} labels were given")]
    LabelCount { rank: usize, labels: usize },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("axis `{0}` must have size >= 1")]
    ZeroSizedAxis(String),
    #[error("standard deviation must be non-negative, got {0}")]
    NegativeStd(f64),
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("{0}")]
    Autograd(String),
    #[error("no closed form for {0}; use the schedule tally")]
    ScheduleOnly(String),
    #[error("batch has no masked target positions")]
    DegenerateBatch,
    #[error("training diverged at step {step}: first non-finite tensor is `{tensor}`")]
    Diverged { step: usize, tensor: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
