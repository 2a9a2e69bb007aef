//! Minimal reverse-mode automatic differentiation engine.
//!
//! Dense row-major f64 tensors form nodes in an acyclic computation graph.
//! Every operation records its inputs when gradients are required, and
//! [`backward`] walks the graph in reverse topological order, accumulating
//! `d root / d tensor` into every tensor that requires a gradient --
//! including intermediate activations, which is what Grad-CAM reads.
//!
//! Images use NCHW layout, convolution kernels OIHW.

mod autograd;
mod error;
mod gradcheck;
mod init;
mod loss;
mod ops;
mod optim;
mod tensor;

pub use autograd::{backward, backward_seeded, zero_grads};
pub use error::TensorError;
pub use gradcheck::grad_check;
pub use init::{kaiming_uniform, uniform};
pub use loss::{bce, ce, mse};
pub use ops::{forward, OpKind};
pub use optim::{adam_step, AdamState};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::from_vec(vec![3.0], &[1]).requires_grad(true);
        let root = w.mul(&w).unwrap().sum().unwrap();
        backward(&root).unwrap();
        assert_eq!(w.grad_vec().unwrap(), vec![6.0]);
    }

    #[test]
    fn mse_sigmoid_chain() {
        // Hand chain rule at x = 0: d/dx mean((sigmoid(x) - 0)^2)
        //   = 2 * sigmoid(0) * sigmoid'(0) = 2 * 0.5 * 0.25 = 0.25.
        let x = Tensor::from_vec(vec![0.0], &[1]).requires_grad(true);
        let t = Tensor::from_vec(vec![0.0], &[1]);
        let root = mse(&x.sigmoid().unwrap(), &t).unwrap();
        backward(&root).unwrap();
        let g = x.grad_vec().unwrap()[0];
        assert!((g - 0.25).abs() < 1e-12, "got {g}");
    }
}
