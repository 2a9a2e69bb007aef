use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::ops::OpKind;
use crate::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Dense row-major f64 tensor; a node in the computation graph.
///
/// Cheap to clone (shared handle). Values are interior-mutable so that
/// optimizers can update parameters in place; the graph structure itself
/// is immutable once built.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) values: RefCell<Vec<f64>>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) requires_grad: Cell<bool>,
    pub(crate) node: Option<Node>,
}

/// Producing operation and its inputs; present on non-leaf tensors.
pub(crate) struct Node {
    pub(crate) op: OpKind,
    pub(crate) inputs: Vec<Tensor>,
}

impl Tensor {
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            values.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    pub(crate) fn from_op(values: Vec<f64>, shape: Vec<usize>, op: OpKind, inputs: Vec<Tensor>) -> Tensor {
        let requires = inputs.iter().any(|t| t.requires());
        let node = if requires { Some(Node { op, inputs }) } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires),
                node,
            }),
        }
    }

    /// Builder-style toggle, used when creating leaf parameters.
    pub fn requires_grad(self, yes: bool) -> Tensor {
        self.inner.requires_grad.set(yes);
        self
    }

    /// Flip gradient tracking on an existing leaf (block freezing).
    pub fn set_requires_grad(&self, yes: bool) {
        debug_assert!(self.inner.node.is_none(), "only leaves are frozen");
        self.inner.requires_grad.set(yes);
    }

    pub fn requires(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.values.borrow()[0]
    }

    /// Copy of the gradient buffer, if one has been accumulated.
    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite values in place (parameter updates, weight loading).
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    /// Apply `f` to the value buffer in place.
    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.values.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.values.borrow())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}
