use serde::{Deserialize, Serialize};

use super::Tensor;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of a model a parameter belongs to. Gradient scoping and
/// partial fine-tuning are expressed in terms of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    FlowField,
    Diffusion,
    Head,
    /// Never updated (frozen feature extractors).
    Frozen,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
}

/// Named, grouped parameter storage. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), super::numel_of(shape), "parameter {name}: bad data length");
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), data, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.group == group).map(|(id, _)| id).collect()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn num_scalars(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.data.len())
            .sum()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Copies values from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert!(self.same_layout(other), "parameter layouts differ");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.data.copy_from_slice(&b.data);
        }
    }

    /// Binds every parameter as a leaf tensor. Parameters whose group
    /// satisfies `track` record gradients.
    pub fn bind(&self, track: impl Fn(ParamGroup) -> bool) -> Vars {
        let leaves = self
            .iter()
            .map(|(id, e)| {
                let t = track(e.group) && e.group != ParamGroup::Frozen;
                Tensor::param_leaf(id, e.data.clone(), &e.shape, t)
            })
            .collect();
        Vars { leaves }
    }

    /// Binds all trainable groups.
    pub fn bind_trainable(&self) -> Vars {
        self.bind(|_| true)
    }

    /// Binds without gradient tracking (inference).
    pub fn bind_frozen(&self) -> Vars {
        self.bind(|_| false)
    }

    /// Sum of squared parameter values in a group.
    pub fn squared_norm(&self, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Parameters materialized as leaf tensors for one forward pass.
pub struct Vars {
    leaves: Vec<Tensor>,
}

impl Vars {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0]
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Gradient table indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64], scale: f64) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += scale * g),
            slot @ None => *slot = Some(grad.iter().map(|g| scale * g).collect()),
        }
    }

    /// `self += scale * other`.
    pub fn merge(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            self.accumulate(id, g, scale);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| s.is_none())
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Largest absolute gradient entry over the parameters of `group`.
    pub fn max_abs_in(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        self.iter()
            .filter(|(id, _)| store.get(*id).group == group)
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
