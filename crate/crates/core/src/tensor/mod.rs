//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto an immutable node in a computation
//! graph. Operations on tensors record graph edges whenever any input
//! `requires_grad`; [`backward`] then populates `grad` buffers with the
//! derivative of a scalar root with respect to every recorded tensor.
//!
//! Design notes that matter to callers:
//! - All math is in 64-bit floats.
//! - The graph is acyclic and owned through `Rc`: dropping the loss tensor
//!   frees the step's graph. Nothing persists across steps.
//! - Graph recording and backward are single-threaded; tensors are
//!   immutable after creation except for their grad buffers.
//! - `detach` copies the value and severs the graph edge; `retain` marks a
//!   mid-graph tensor as a gradient observation point (used for feature
//!   maps) while keeping upstream edges intact.
//! - Repeated `backward` calls accumulate into `grad` until
//!   [`Tensor::zero_grad`] is called.

mod backward;
mod op;

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

pub use backward::{backward, finite_diff_check};
pub(crate) use op::Op;
pub use op::{apply_custom_op, strided_output_len, CustomOp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {what}")]
    BadAttribute { op: &'static str, what: String },
    #[error("ln: non-positive input {value} at flat index {index}; use the log-softmax path for probabilities")]
    NonPositiveLog { value: f64, index: usize },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: root is not attached to a recorded graph (inputs are detached or constant)")]
    DetachedGraph,
}

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// Handle onto a graph node. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn new_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant leaf; carries no gradient.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self::new_node(shape.to_vec(), data, false, Op::Leaf)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self::new_node(shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(&[1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Value-equal copy with no graph edge and `requires_grad = false`.
    pub fn detach(&self) -> Tensor {
        Self::new_node(self.node.shape.clone(), self.node.data.clone(), false, Op::Leaf)
    }

    /// Identity that forces `requires_grad` so backward populates this
    /// tensor's grad even when nothing upstream is trainable. Gradients
    /// still flow through to the input when the input requires them.
    pub fn retain(&self) -> Tensor {
        Self::new_node(
            self.node.shape.clone(),
            self.node.data.clone(),
            true,
            Op::Retain(self.clone()),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }
}
