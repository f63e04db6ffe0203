use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    EmptyDimension(Vec<usize>),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input side {input} with kernel {kernel}, stride {stride}, pad {pad} gives no integral output size")]
    Geometry {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("batch norm in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("optimizer state does not match parameter store: {0}")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
