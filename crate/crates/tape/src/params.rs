use std::collections::BTreeMap;

use crate::{Gradients, Graph, Tensor, Var};

/// Named learnable arrays, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Number of named arrays.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Place every array on `graph` as a differentiable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParamSet {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Panics when `name` is not bound; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    /// Collect the gradient of every bound array (zeros when unused).
    pub fn grads(&self, grads: &Gradients) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.wrt_or_zeros(*v)))
            .collect()
    }
}
