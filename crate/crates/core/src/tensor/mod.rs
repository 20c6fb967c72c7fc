//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! Every forward operation allocates a fresh immutable node holding its
//! output buffer, its parent handles, and an [`Op`] tag describing how to
//! route gradients backward. Calling [`Tensor::backward`] on a scalar walks
//! the graph once in reverse topological order and accumulates `d loss / d
//! node` into every node that requires gradients.
//!
//! Determinism: node ids come from a global counter, the traversal is a
//! fixed-order depth-first walk, and every kernel loops in row-major order,
//! so identical inputs produce bit-identical outputs and gradients on every
//! run and platform.

mod backward;
mod checkpoint;
mod gradcheck;
mod ops;

pub use checkpoint::{load_named, save_named};
pub use gradcheck::{grad_check, grad_check_default, max_rel_err, DEFAULT_STEP};
pub(crate) use ops::{row_max as row_max_of, softplus_val, RoiPlan, Tap};
#[cfg(test)]
pub(crate) use ops::sigmoid_val;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Operation tag stored on each graph node. Parents live on the node itself;
/// variants only carry the metadata their backward rule needs.
#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    /// Elementwise with optional suffix broadcast of the second parent.
    Add,
    Sub,
    Mul,
    /// Elementwise, both operands the same shape.
    Div,
    Neg,
    MulScalar(S),
    AddScalar(S),
    Exp,
    Sigmoid,
    Relu,
    Softplus,
    /// Elementwise min/max of two same-shape tensors. On exact ties the
    /// first operand receives the gradient.
    Minimum,
    Maximum,
    /// Gradient passes where `lo <= x <= hi`, zero outside.
    Clamp(S, S),
    Matmul,
    /// Batched matmul over a single leading batch axis.
    Bmm,
    TransposeLast2,
    Reshape,
    SliceLast(usize, usize),
    ConcatLast,
    Stack,
    SelectRows(Vec<usize>),
    Sum,
    Mean,
    SoftmaxRows,
    NormalizeRows,
    /// Parents: input, gamma, beta. Normalizes over the last axis.
    LayerNorm(S),
    /// Parents: features `[n, p, d]`, mask `[n, d]`.
    ScaleChannels,
    /// Parent: feature map `[c, h, w]`; sampling plan frozen at forward time.
    RoiAlign(RoiPlan),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    op: Op<S>,
}

/// Handle to an immutable autodiff graph node.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn new_node(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        op: Op<S>,
    ) -> Self {
        assert!(
            numel_of(&shape) == data.len(),
            "tensor shape {:?} implies {} elements but buffer holds {}",
            shape,
            numel_of(&shape),
            data.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                op,
            }),
        }
    }

    /// Leaf holding fixed data; never receives gradients.
    pub fn constant(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, false, Vec::new(), Op::Leaf)
    }

    /// Leaf that accumulates gradients during backward.
    pub fn variable(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, true, Vec::new(), Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![S::zero(); numel_of(shape)])
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self::constant(shape, vec![v; numel_of(shape)])
    }

    /// Constant with shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Self::constant(&[1], vec![v])
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> S {
        assert!(
            self.numel() == 1,
            "value() on tensor of shape {:?}",
            self.shape()
        );
        self.node.data[0]
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, idx: &[usize]) -> S {
        assert!(
            idx.len() == self.shape().len(),
            "index rank {} does not match tensor rank {}",
            idx.len(),
            self.shape().len()
        );
        let strides = strides_of(self.shape());
        let mut flat = 0;
        for (d, (&i, &n)) in idx.iter().zip(self.shape()).enumerate() {
            assert!(i < n, "index {} out of bounds for axis {} of extent {}", i, d, n);
            flat += i * strides[d];
        }
        self.node.data[flat]
    }

    /// Copy of the accumulated gradient, if backward has deposited one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Leaf copy of this tensor's data, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.shape(), self.data().to_vec())
    }

    pub(crate) fn accumulate_grad(&self, contribution: impl FnOnce(&mut [S])) {
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        contribution(buf);
    }

    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Runs reverse-mode accumulation from this scalar. Every tensor with
    /// `requires_grad` reachable from here ends up holding its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a graph with no differentiable leaves".into(),
            ));
        }
        self.accumulate_grad(|buf| buf[0] += S::one());
        let order = self.topo_order();
        for t in order.iter().rev() {
            let grad = t.node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            backward::apply(&t.node.op, &grad, &t.node.data, &t.node.shape, &t.node.parents);
        }
        Ok(())
    }
}

/// Named trainable leaf. The handle survives across optimizer steps; each
/// update swaps in a fresh leaf tensor so graphs from earlier steps keep
/// seeing the values they were built from.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    value: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<S>) -> Self {
        Parameter {
            name: name.into(),
            value: Tensor::variable(shape, data),
        }
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[S] {
        self.value.data()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.value.grad()
    }

    /// Replaces the underlying leaf with new values of the same shape.
    pub fn assign(&mut self, data: Vec<S>) {
        assert!(
            data.len() == self.value.numel(),
            "parameter {}: assign of {} values into shape {:?}",
            self.name,
            data.len(),
            self.value.shape()
        );
        let shape = self.value.shape().to_vec();
        self.value = Tensor::variable(&shape, data);
    }

    /// Swaps in a specific tensor (used by gradient checking to substitute a
    /// probe leaf for this parameter).
    pub fn replace_tensor(&mut self, t: Tensor<S>) {
        assert!(
            t.shape() == self.value.shape(),
            "parameter {}: replacement shape {:?} does not match {:?}",
            self.name,
            t.shape(),
            self.value.shape()
        );
        self.value = t;
    }
}
