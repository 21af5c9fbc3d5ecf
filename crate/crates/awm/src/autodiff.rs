//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every operator produces a [`Var`] holding its forward value, its parent
//! variables, and a closure that routes the incoming gradient to the parents.
//! `backward` on a scalar root walks the graph in reverse topological order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient routing context handed to an operator's backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor,
    /// The node's forward value.
    pub out: &'a Tensor,
    /// Parent variables, in the order they were registered.
    pub parents: &'a [Var],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>)>;

pub(crate) struct Node {
    id: u64,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    param: Option<Param>,
    backward_done: Cell<bool>,
}

/// A value in the recorded computation graph.
#[derive(Clone)]
pub struct Var {
    node: Rc<Node>,
}

impl Var {
    fn from_node(node: Node) -> Var {
        Var { node: Rc::new(node) }
    }

    /// Constant leaf: participates in the forward pass, accumulates a
    /// gradient (readable in tests) but is not backed by a parameter.
    pub fn leaf(value: Tensor) -> Var {
        Var::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            param: None,
            backward_done: Cell::new(false),
        })
    }

    /// Leaf backed by a named parameter; backward deposits the gradient
    /// into the parameter's grad buffer.
    pub fn param(p: &Param) -> Var {
        Var::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: p.value().clone(),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            param: Some(p.clone()),
            backward_done: Cell::new(false),
        })
    }

    /// Interior node produced by an operator.
    pub fn new_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        Var::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            param: None,
            backward_done: Cell::new(false),
        })
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad.borrow().clone()
    }

    pub fn accumulate(&self, g: &Tensor) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    fn id(&self) -> u64 {
        self.node.id
    }

    /// Reverse-accumulate gradients from this scalar root. A second call on
    /// the same root without a fresh forward pass is rejected.
    pub fn backward(&self) -> Result<()> {
        if self.node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.backward_done.get() {
            return Err(Error::invalid(
                "backward called twice on the same root without a new forward pass",
            ));
        }
        self.node.backward_done.set(true);

        let order = topo_order(self);
        self.accumulate(&Tensor::scalar(1.0));

        for var in order.iter().rev() {
            let grad = var.node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(backward) = &var.node.backward {
                let ctx = BackwardCtx {
                    grad: &grad,
                    out: &var.node.value,
                    parents: &var.node.parents,
                };
                backward(&ctx);
            }
            if let Some(p) = &var.node.param {
                p.accumulate_grad(&grad);
            }
        }
        Ok(())
    }
}

/// Iterative post-order DFS; result is a topological order (parents first).
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // (var, child_index) stack
    let mut stack: Vec<(Var, usize)> = Vec::new();
    if visited.insert(root.id()) {
        stack.push((root.clone(), 0));
    }
    while let Some((var, idx)) = stack.pop() {
        if idx < var.node.parents.len() {
            let child = var.node.parents[idx].clone();
            stack.push((var, idx + 1));
            if visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(var);
        }
    }
    order
}

/// Which component of the model a parameter belongs to; the alternating
/// training schedule freezes one group at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Awm,
}

struct ParamInner {
    name: String,
    group: ParamGroup,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
}

/// A named, trainable tensor shared between the model and the optimizer.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Param {
        Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                group,
                value: RefCell::new(value),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn name(&self) -> String {
        self.inner.name.clone()
    }

    pub fn group(&self) -> ParamGroup {
        self.inner.group
    }

    pub fn value(&self) -> std::cell::Ref<'_, Tensor> {
        self.inner.value.borrow()
    }

    pub fn set_value(&self, t: Tensor) {
        *self.inner.value.borrow_mut() = t;
    }

    /// In-place update through a closure (used by the optimizer).
    pub fn update(&self, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.inner.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.grad.borrow().clone()
    }

    pub fn accumulate_grad(&self, g: &Tensor) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn numel(&self) -> usize {
        self.inner.value.borrow().len()
    }
}
