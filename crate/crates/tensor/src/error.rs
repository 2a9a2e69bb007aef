use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar root (or an explicit seed), got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("seed gradient length {seed} does not match root length {root}")]
    SeedMismatch { seed: usize, root: usize },

    #[error("adam_step: parameter {index} has no gradient")]
    MissingGrad { index: usize },

    #[error("adam_step: moment buffer length {have} does not match parameter length {want}")]
    StateMismatch { have: usize, want: usize },

    #[error("bce expects predictions in (0,1), got {0}")]
    BceRange(f64),

    #[error("ce: class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("grad_check: graph has no parameters with requires_grad")]
    NoParameters,
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        TensorError::ShapeMismatch { op, detail }
    }
}
