use crate::ops::{forward, OpKind};
use crate::tensor::Tensor;
use crate::Result;

/// Mean squared error, mean-reduced to a scalar.
pub fn mse(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    forward(OpKind::Mse, &[prediction.clone(), target.clone()])
}

/// Binary cross-entropy on probabilities in (0,1), mean-reduced.
pub fn bce(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    forward(OpKind::Bce, &[prediction.clone(), target.clone()])
}

/// Cross-entropy on raw logits of shape (n, classes) against integer
/// class targets, mean-reduced.
pub fn ce(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    forward(OpKind::Ce { targets: targets.to_vec() }, &[logits.clone()])
}
