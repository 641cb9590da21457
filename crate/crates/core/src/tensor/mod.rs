//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node: shape, row-major
//! `f64` data, and (for non-leaves) the operation that produced it. Every
//! operation whose inputs require gradients records a backward rule; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph once in reverse
//! topological order and accumulates gradients into the leaves.
//!
//! Only leaf gradients persist between calls. They accumulate until
//! [`Tensor::zero_grad`] is called.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

mod linalg;
mod nn;
mod ops;
mod shape;

pub use nn::LAYER_NORM_EPS;
pub use shape::PAD_INDEX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("data of length {len} cannot fill shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule of a recorded operation.
///
/// Returns one entry per input. Entries for inputs whose `needs` flag is
/// false may be `None`.
pub(crate) trait GradFn {
    fn backward(
        &self,
        inputs: &[Tensor],
        out: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    inputs: Vec<Tensor>,
    grad_fn: Option<Box<dyn GradFn>>,
    op: &'static str,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        inputs: Vec<Tensor>,
        grad_fn: Option<Box<dyn GradFn>>,
        op: &'static str,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            inputs,
            grad_fn,
            op,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor; with `requires_grad` it receives gradients on backward.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(
            shape.to_vec(),
            data,
            requires_grad,
            Vec::new(),
            None,
            "leaf",
        ))
    }

    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(
            shape.to_vec(),
            vec![0.0; numel(shape)],
            false,
            Vec::new(),
            None,
            "leaf",
        )
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(
            shape.to_vec(),
            vec![value; numel(shape)],
            false,
            Vec::new(),
            None,
            "leaf",
        )
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(Vec::new(), vec![value], false, Vec::new(), None, "leaf")
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// some input requires a gradient.
    pub(crate) fn from_op<G: GradFn + 'static>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        grad_fn: G,
    ) -> Tensor {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        if requires_grad {
            let inputs = inputs.iter().map(|t| (*t).clone()).collect();
            Self::build(shape, data, true, inputs, Some(Box::new(grad_fn)), op)
        } else {
            Self::build(shape, data, false, Vec::new(), None, op)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(
            self.0.shape.clone(),
            self.0.data.clone(),
            false,
            Vec::new(),
            None,
            "leaf",
        )
    }

    /// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(f) => {
                    let needs: Vec<bool> =
                        node.0.inputs.iter().map(|t| t.requires_grad()).collect();
                    let input_grads = f.backward(&node.0.inputs, &node.0.data, &g, &needs);
                    for ((input, ig), need) in node.0.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(ig), true) = (ig, need) else {
                            continue;
                        };
                        debug_assert_eq!(ig.len(), input.numel(), "grad size for {}", node.0.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients; inputs precede consumers.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in &t.0.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    /// Number of recorded operation nodes reachable from this tensor.
    pub fn graph_size(&self) -> usize {
        self.topological_order()
            .iter()
            .filter(|t| !t.is_leaf())
            .count()
    }
}
