//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a new [`Tensor`]. When any input requires a
//! gradient the result records a graph node holding its parents and a
//! backward closure; [`Tensor::backward`] sweeps those nodes in reverse
//! topological order and accumulates gradients into the leaves. Running a
//! sweep consumes the graph, so a second `backward` over the same nodes is
//! rejected rather than silently double-counting.

mod conv;
mod linalg;
mod loss;
mod norm;
mod ops;
mod sample;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use conv::Conv2dSpec;
pub use loss::IGNORE_INDEX;

/// Inputs handed to a backward closure.
pub(crate) struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
    pub output: &'a [f64],
    /// Whether each parent wants a gradient.
    pub needs: &'a [bool],
}

/// Gradient for each parent, `None` where not needed.
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> ParentGrads>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: RefCell<Option<Node>>,
    consumed: Cell<bool>,
}

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A shared handle to an immutable n-dimensional array.
///
/// Cloning is cheap and aliases the same storage and gradient slot.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node: RefCell::new(node),
            consumed: Cell::new(false),
        }))
    }

    /// A constant tensor. Fails on a shape/length mismatch, a zero extent or
    /// a non-finite value.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_leaf(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_leaf(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    fn check_leaf(shape: &[usize], data: &[f64]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    /// Records the result of an operation. `backward` is only kept when at
    /// least one parent takes part in differentiation.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Result<Self>
    where
        F: Fn(&BackwardCtx<'_>) -> ParentGrads + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: shape/data mismatch");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward: Box::new(backward),
        });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// True for tensors not produced by a recorded operation.
    pub fn is_leaf(&self) -> bool {
        self.0.node.borrow().is_none() && !self.0.consumed.get()
    }

    /// The accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Argument(format!(
                "item() on tensor of shape {:?}",
                self.0.shape
            ))),
        }
    }

    pub fn same_values(&self, other: &Tensor) -> bool {
        self.shape() == other.shape() && self.data() == other.data()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients are added to whatever leaves already hold, so call
    /// [`Tensor::zero_grad`] on parameters between optimisation steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.consumed.get() {
            return Err(Error::State(
                "graph already consumed by a previous backward".into(),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::State(
                "loss is detached: no input requires a gradient".into(),
            ));
        }

        let order = self.topo_order()?;
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.borrow();
            let Some(node) = node.as_ref() else {
                t.accumulate(&g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &g,
                parents: &node.parents,
                output: t.data(),
                needs: &needs,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "{}: grad length", node.op);
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }

        for t in &order {
            if t.0.node.borrow_mut().take().is_some() {
                t.0.consumed.set(true);
            }
        }
        Ok(())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes reachable from `self` that need gradients, parents first.
    fn topo_order(&self) -> Result<Vec<Tensor>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            if t.0.consumed.get() {
                return Err(Error::State(
                    "graph already consumed by a previous backward".into(),
                ));
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.borrow().as_ref() {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Ok(order)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.borrow().as_ref().map(|n| n.op);
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &op)
            .finish()
    }
}

pub(crate) fn expect_ndim(t: &Tensor, ndim: usize, op: &str) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::Dimension(format!(
            "{op} expects a {ndim}-d tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Unpacks an `[N, C, H, W]` shape.
pub(crate) fn dims4(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    expect_ndim(t, 4, op)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}
