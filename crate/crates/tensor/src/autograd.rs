use std::collections::HashSet;

use crate::ops::compute_backward;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Reverse-mode sweep from a scalar root, seeding with gradient 1.
///
/// Every reachable tensor with `requires_grad` accumulates
/// `d root / d tensor`; repeated calls keep accumulating unless grads are
/// zeroed in between.
pub fn backward(root: &Tensor) -> Result<()> {
    if !root.is_scalar() {
        return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
    }
    backward_seeded(root, &[1.0])
}

/// Reverse-mode sweep with a caller-supplied seed gradient.
pub fn backward_seeded(root: &Tensor, seed: &[f64]) -> Result<()> {
    if seed.len() != root.numel() {
        return Err(TensorError::SeedMismatch {
            seed: seed.len(),
            root: root.numel(),
        });
    }
    if !root.requires() {
        return Ok(());
    }
    let order = topo_order(root);
    root.accumulate_grad(seed);
    // reverse post-order: every tensor is handled after all of its consumers
    for t in order.iter().rev() {
        let Some(node) = t.inner.node.as_ref() else {
            continue;
        };
        let grad_out = match t.grad_vec() {
            Some(g) => g,
            None => continue, // no consumer contributed; dead branch
        };
        let input_grads = compute_backward(&node.op, &node.inputs, t, &grad_out);
        for (input, grad) in node.inputs.iter().zip(input_grads) {
            if let Some(g) = grad {
                input.accumulate_grad(&g);
            }
        }
    }
    Ok(())
}

/// Clear gradients on the given tensors.
pub fn zero_grads(tensors: &[Tensor]) {
    for t in tensors {
        t.zero_grad();
    }
}

/// Iterative DFS post-order over the graph rooted at `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, child cursor)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.inner.id);
    while let Some((t, cursor)) = stack.pop() {
        let children = t.inner.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if cursor < children.len() {
            let child = children[cursor].clone();
            stack.push((t, cursor + 1));
            if child.requires() && visited.insert(child.inner.id) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}
