use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("input has {got} features but the network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("variable {0} is not recorded on this tape")]
    UnknownVar(usize),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("output adjoint has length {got}, expected {expected}")]
    AdjointLength { expected: usize, got: usize },
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` expects {expected} values, got {got}")]
    ParamSize {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("gradients are not aligned with the parameter store")]
    Misaligned,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
