use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite input")]
    NonFinite,

    #[error("{what} index {index} out of range (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("plan length {got} does not match switch count {expected}")]
    PlanLength { got: usize, expected: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("plan changed mid-generation")]
    PlanChanged,

    #[error("budget out of range [l_min, 1]: got {value}, l_min = {l_min}")]
    BudgetOutOfRange { value: f64, l_min: f64 },

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid task spec: {0}")]
    TaskSpec(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("non-finite loss at step {step} (loss = {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
