use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// A named tensor of learnable values plus its trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameter groups. Ids are stable: groups are only
/// ever appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Input(format!("invalid group name {name:?}")));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::Input(format!("duplicate group name {name}")));
        }
        let id = ParamId(self.groups.len());
        self.by_name.insert(name.clone(), id);
        self.groups.push(ParamGroup {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.groups[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.groups[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGroup)> {
        self.groups.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn frozen_count(&self) -> usize {
        self.groups.iter().filter(|g| !g.trainable).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(|g| g.tensor.len()).sum()
    }
}

/// Per-group gradients; `None` for groups that were frozen at evaluation time.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(groups: usize) -> Self {
        Self {
            grads: vec![None; groups],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `factor * other` entrywise for groups present in both.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (id, g) in other.iter() {
            if let Some(mine) = self.get_mut(id) {
                for (m, o) in mine.data_mut().iter_mut().zip(g.data()) {
                    *m += factor * o;
                }
            }
        }
    }
}
