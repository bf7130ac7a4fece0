//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; node ids are
//! assigned in creation order, so the arena is already topologically
//! sorted and backward is a single reverse sweep that touches each node
//! once. A tape is rebuilt for every forward pass and confined to one
//! thread. Parameter data lives behind `Arc`s so leaves can be created
//! without copying and parameter stores can be shared read-only.

mod backward;
mod element;
mod gradcheck;
mod ops;
mod params;
#[cfg(test)]
mod tests;

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

pub use backward::Gradients;
pub use element::Element;
pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, finite_diff_check, relative_error, GradCheckReport,
};
pub use params::{GradMap, Param, ParamBinding, ParamStore};

use crate::error::{contract, Error, Result};

/// Product of the dimensions; `1` for a scalar (empty shape).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Deliberately wrong backward rules, used as a negative control for the
/// finite-difference harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.01.
    Gelu,
    /// Drops the mean-centering term in the layer-norm input gradient.
    LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Gelu {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Transpose {
        input: usize,
        axes: (usize, usize),
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
        count: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<T>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) name: Option<String>,
}

/// Arena recording the computation graph of one forward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<BackwardFault>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            fault: Cell::new(None),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Installs a corrupted backward rule for negative-control testing.
    pub fn inject_fault(&self, fault: Option<BackwardFault>) {
        self.fault.set(fault);
    }

    pub(crate) fn fault(&self) -> Option<BackwardFault> {
        self.fault.get()
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        op: Op,
        requires_grad: bool,
        name: Option<String>,
    ) -> Tensor<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            name,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(&self, shape: Vec<usize>, value: Vec<T>, op: Op, inputs: &[usize]) -> Tensor<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(shape, Arc::new(value), op, requires_grad, None)
    }

    fn check_leaf(shape: &[usize], len: usize) -> Result<()> {
        if shape.contains(&0) {
            return contract(format!("tensor shape {shape:?} has a zero dimension"));
        }
        if numel(shape) != len {
            return Err(Error::Dimension {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    /// A leaf that does not require gradients.
    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        Self::check_leaf(shape, data.len())?;
        Ok(self.push(shape.to_vec(), Arc::new(data), Op::Leaf, false, None))
    }

    /// A named leaf that requires gradients; its gradient is reported under `name`.
    pub fn var(&self, name: &str, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.shared_var(name, shape, Arc::new(data))
    }

    /// Like [`Tape::var`] but reuses existing storage.
    pub fn shared_var(&self, name: &str, shape: &[usize], data: Arc<Vec<T>>) -> Result<Tensor<'_, T>> {
        Self::check_leaf(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true, Some(name.to_string())))
    }

    /// A constant leaf backed by existing storage.
    pub fn shared_constant(&self, shape: &[usize], data: Arc<Vec<T>>) -> Result<Tensor<'_, T>> {
        Self::check_leaf(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false, None))
    }

    pub fn scalar(&self, v: T) -> Tensor<'_, T> {
        self.push(Vec::new(), Arc::new(vec![v]), Op::Leaf, false, None)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Element> Tensor<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.tape.nodes.borrow()[self.id].shape.len()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Shared handle to the row-major data.
    pub fn value(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if node.value.len() != 1 {
            return contract(format!("item() on tensor of shape {:?}", node.shape));
        }
        Ok(node.value[0])
    }

    fn same_tape(&self, other: &Tensor<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            contract("tensors belong to different tapes")
        }
    }
}
