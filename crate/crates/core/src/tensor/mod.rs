//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major contiguous buffer plus a shape. Operations on
//! tensors that participate in gradient computation record a backward closure
//! and their parent handles; [`Tensor::backward`] topologically sorts the
//! recorded operations into a [`Tape`] and runs them in reverse, accumulating
//! gradients additively into every `requires_grad` leaf.
//!
//! Tensors are single-threaded values (`Rc` internally). Data is immutable
//! after construction except for the grad buffer and the optimizer's
//! single-writer parameter updates between steps.

mod gradcheck;
mod ops;
mod scalar;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_leaves, GradcheckError};
pub use ops::label_smoothed_ce;
pub use scalar::Scalar;
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but buffer holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("matmul shape mismatch: lhs {lhs:?} is incompatible with rhs {rhs:?}")]
    MatmulShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("operand shapes {lhs:?} and {rhs:?} do not broadcast (leading batch dims and scalars only)")]
    BroadcastMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("axis {axis} out of bounds for rank-{rank} tensor")]
    AxisOutOfBounds { axis: usize, rank: usize },
    #[error("cannot reshape {from:?} ({from_elems} elements) into {to:?} ({to_elems} elements)")]
    ReshapeMismatch {
        from: Vec<usize>,
        from_elems: usize,
        to: Vec<usize>,
        to_elems: usize,
    },
    #[error("invalid permutation {perm:?} for rank-{rank} tensor")]
    InvalidPermutation { perm: Vec<usize>, rank: usize },
    #[error("slice [{start}, {start}+{len}) exceeds extent {extent} along axis {axis}")]
    SliceOutOfBounds {
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("concat operands disagree on shape outside axis {axis}: {lhs:?} vs {rhs:?}")]
    ConcatShapeMismatch {
        axis: usize,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("backward requires a scalar loss; tensor has shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward requires a loss attached to the tape; tensor is detached")]
    DetachedLoss,
    #[error("gather index {index} out of bounds for table with {rows} rows")]
    GatherIndexOutOfBounds { index: usize, rows: usize },
    #[error("class target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("target count {targets} does not match batch size {batch}")]
    TargetCountMismatch { targets: usize, batch: usize },
    #[error("label smoothing {eps} outside [0, 1)")]
    InvalidSmoothing { eps: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_TENSOR_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_TENSOR_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: receives the cotangent of the op output and accumulates
/// into the grads of the captured parent tensors.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E])>;

pub(crate) struct Node<E: Scalar> {
    pub(crate) parents: Vec<Tensor<E>>,
    pub(crate) backward: BackwardFn<E>,
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    node: Option<Node<E>>,
}

/// N-dimensional dense tensor, cheap to clone (shared buffer).
pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("on_tape", &self.inner.node.is_some())
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    /// Leaf tensor from a flat row-major buffer.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Rank-0 scalar.
    pub fn scalar(v: E) -> Self {
        Self::build(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(vec![E::zero(); n], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self::build(vec![v; n], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    /// Mark a leaf for gradient accumulation. Intended for chaining at
    /// construction sites; returns a fresh leaf holding the same data.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.inner.node.is_none(),
            "requires_grad applies to leaves, not op outputs"
        );
        let data = self.inner.data.borrow().clone();
        Self::build(data, self.inner.shape.clone(), true, None)
    }

    pub(crate) fn build(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<E>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Borrow the underlying buffer.
    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Copy the underlying buffer out.
    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the buffer in place. Single-writer discipline: never call
    /// while a forward/backward pass over this tensor is in flight.
    pub fn set_data(&self, data: &[E]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub(crate) fn nudge(&self, index: usize, delta: E) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn does_require_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether gradients flow through this tensor at all.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub(crate) fn reset_grad_zeros(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::zero(); self.numel()]);
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<E>>> {
        self.inner.grad.borrow()
    }

    pub(crate) fn node(&self) -> Option<&Node<E>> {
        self.inner.node.as_ref()
    }

    /// Same data, detached from the tape, no grad participation.
    pub fn detach(&self) -> Tensor<E> {
        Self::build(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    /// Accumulate gradients of a scalar loss into every `requires_grad` leaf
    /// reachable from it. Gradients add onto whatever is already stored; the
    /// caller zeroes leaf grads between optimization steps.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        if !self.needs_grad() {
            return Err(TensorError::DetachedLoss);
        }
        Tape::trace(self).run_backward(self);
        Ok(())
    }

    /// Convert elements to another scalar type. Produces a detached leaf.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|v| F::from_f64(v.as_f64()))
            .collect();
        Tensor::<F>::build(data, self.inner.shape.clone(), false, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        let err = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::<f64>::scalar(4.0);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 4.0);
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad();
        let s = t.scale(2.0);
        assert!(matches!(
            s.backward(),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_rejects_detached() {
        let t = Tensor::<f64>::scalar(1.0);
        assert!(matches!(t.backward(), Err(TensorError::DetachedLoss)));
    }
}
