use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adjoint of one recorded op: given the output gradient and which parents
/// need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Records executed ops in topological (execution) order.
///
/// A graph is replayed at most once: [`Graph::backward`] consumes the
/// recorded adjoints and a second call is rejected.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    check_finite: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite: Cell::new(cfg!(debug_assertions)),
        }
    }

    /// Turns the per-op non-finite check on or off (default: on in debug builds).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Same value as `v`, cut off from the gradient flow.
    pub fn stop_gradient<'g>(&'g self, v: Var<'g, T>) -> Var<'g, T> {
        let value = self.nodes.borrow()[v.id].value.clone();
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an op result; the adjoint is kept only if some parent needs it.
    pub(crate) fn record<'g>(
        &'g self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'g, T>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new one".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::full(&shape, T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.take() else {
                // leaf: keep its gradient
                grads[id] = Some(grad);
                continue;
            };
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contributions = backward(&grad, &needs);
            for ((&p, contribution), need) in parents.iter().zip(contributions).zip(needs) {
                let Some(g) = contribution else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        // free recorded adjoints that were never reached
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }
}
