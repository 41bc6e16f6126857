use super::graph::{Gradients, Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named set of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `graph`; trainable leaves when `trainable`,
    /// constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_same_layout(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter sets have different names".into()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape("ParamStore::assign", a.shape(), b.shape()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
pub struct BoundParams<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> BoundParams<'g, T> {
    /// Wraps handles that are already on a graph, one per parameter in store order.
    pub fn from_vars(store: &ParamStore<T>, vars: Vec<Var<'g, T>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::shape("BoundParams::from_vars", &[store.len()], &[vars.len()]));
        }
        for (t, v) in store.tensors.iter().zip(&vars) {
            if t.shape() != v.shape().as_slice() {
                return Err(Error::shape("BoundParams::from_vars", t.shape(), &v.shape()));
            }
        }
        Ok(Self { vars })
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradient for each parameter, in store order.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
