use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("unsupported field shape {0:?}: expected (N,), (H, W) or (H, W, C) with nonzero dims")]
    UnsupportedShape(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown class id {id}: model has {classes} classes")]
    UnknownClass { id: usize, classes: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite state at sampler step {step}")]
    NonFiniteState { step: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
