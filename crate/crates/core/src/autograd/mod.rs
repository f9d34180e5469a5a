//! Minimal reverse-mode differentiation engine.
//!
//! The op set is closed and hand-written: exactly the tensor operations the
//! restoration network and its loss require, each with its own backward
//! rule. There is no broadcasting engine. Tensors store f32 by default; the
//! whole engine is generic over [`Scalar`] so the gradient checker can run
//! the identical code paths in f64 ("shadow mode").
//!
//! A tensor produced by an op keeps handles to its inputs, forming an
//! implicit acyclic graph. [`backward`] walks the graph once in reverse
//! topological order, accumulates gradients into every `requires_grad` leaf,
//! and consumes the graph; a second backward on the same loss is an error.
//!
//! Tensors are intentionally not `Send`: a graph belongs to one execution
//! context. Individual kernels may parallelize internally with rayon; every
//! parallel kernel is written as a gather with a fixed per-element
//! accumulation order, so results are bit-identical regardless of thread
//! count.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    add, bad_identity, bmm, concat_channels, conv3d, crop_spatial, l1_loss, leaky_relu, mul,
    mul_scalar, nonlocal_attention, nonlocal_attention_with_weights, nonlocal_delta, reshape,
    slice_channels, softmax_last, stride_sample, sum_all, transpose_last2, trilinear_upsample,
    voxel_shuffle, voxel_unshuffle, NonlocalParams,
};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use ops::Op;

/// Element type of the engine: f32 for training and inference, f64 for
/// finite-difference gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Casts an f64 literal into the element type.
#[inline]
pub fn lit<E: Scalar>(v: f64) -> E {
    E::from_f64(v).expect("literal must be representable")
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: RefCell<Option<Op<E>>>,
}

/// An N-dimensional array participating in the differentiation graph.
/// Cloning is cheap (shared handle). Network tensors use the canonical
/// layout `[batch, channels, d, h, w]`; a scalar has the empty shape.
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

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    fn build(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        op: Option<Op<E>>,
    ) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: RefCell::new(op),
            }),
        })
    }

    /// A constant leaf (no gradient).
    pub fn from_data(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// A trainable leaf (gradient accumulated by [`backward`]).
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![E::zero(); numel_of(shape)], false, None).unwrap()
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None).unwrap()
    }

    pub fn scalar(value: E) -> Self {
        Self::build(Vec::new(), vec![value], false, None).unwrap()
    }

    /// Output of an op. In debug builds every produced value is checked to
    /// be finite; a NaN/Inf is reported as an error naming the op.
    pub(crate) fn output(
        shape: Vec<usize>,
        data: Vec<E>,
        op: Op<E>,
        op_name: &'static str,
    ) -> Result<Self> {
        if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let tracked = op.inputs().iter().any(|t| t.wants_grad());
        Self::build(shape, data, false, tracked.then_some(op))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when a backward pass must flow gradient into or through this
    /// tensor (trainable leaf, or intermediate with an intact graph).
    pub(crate) fn wants_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.borrow().is_some()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    /// Replaces the stored values. Meant for optimizers and the gradient
    /// checker; the length must match.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "set_data length {} vs {}",
                data.len(),
                self.numel()
            )));
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Detached constant copy of this tensor's values.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_data(&self.inner.shape, self.to_vec()).unwrap()
    }
}

/// Reverse topological order of all op-bearing nodes reachable from `root`.
fn topo_order<E: Scalar>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, child_idx)) = stack.pop() {
        let children: Vec<Tensor<E>> = node
            .inner
            .op
            .borrow()
            .as_ref()
            .map(|op| op.inputs())
            .unwrap_or_default();
        if child_idx < children.len() {
            stack.push((node.clone(), child_idx + 1));
            let child = children[child_idx].clone();
            if child.inner.op.borrow().is_some() && visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Backpropagates from a scalar loss, accumulating gradients into every
/// `requires_grad` leaf. The graph is consumed: op links are dropped as the
/// traversal visits them, and a second call fails with `GraphConsumed`.
pub fn backward<E: Scalar>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if loss.inner.op.borrow().is_none() {
        return Err(Error::GraphConsumed);
    }
    let order = topo_order(loss);
    loss.accumulate_grad(&[E::one()]);
    for node in order.iter().rev() {
        let op = node.inner.op.borrow_mut().take();
        let Some(op) = op else { continue };
        let grad = node.inner.grad.borrow().clone();
        if let Some(grad) = grad {
            let data = node.inner.data.borrow();
            op.backward(&node.inner.shape, &data, &grad)?;
        }
        if !node.inner.requires_grad {
            *node.inner.grad.borrow_mut() = None;
        }
    }
    Ok(())
}
