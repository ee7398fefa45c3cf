//! Named parameter storage and its binding into an autograd [`Graph`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Mat;

/// Trainable parameters keyed by dotted names (`prompt.*`, `fusion.<i>.*`,
/// `adapter.*`). Iteration order is lexicographic, which fixes the order of
/// every reduction over parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.entries.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Mat::len).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

/// Which parameter groups an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub prompts: bool,
    pub fusion: bool,
    pub adapter: bool,
}

impl TrainableSet {
    pub const ALL: Self = Self { prompts: true, fusion: true, adapter: true };
    pub const NONE: Self = Self { prompts: false, fusion: false, adapter: false };

    pub fn contains(&self, name: &str) -> bool {
        match name.split('.').next() {
            Some("prompt") => self.prompts,
            Some("fusion") => self.fusion,
            Some("adapter") => self.adapter,
            _ => false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.prompts || self.fusion || self.adapter)
    }
}

impl Default for TrainableSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Lazily places store entries on a graph. Entries in the trainable set
/// become gradient-carrying leaves; the rest are constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: TrainableSet,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: TrainableSet) -> Self {
        Self { store, trainable, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.expect(name).clone();
        let v = if self.trainable.contains(name) { g.param(value) } else { g.constant(value) };
        self.bound.insert(name.to_owned(), v);
        v
    }

    /// Gradients of the bound trainable entries, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.contains(name))
            .filter_map(|(name, &v)| grads.get(v).map(|m| (name.clone(), m.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_set_matches_prefixes() {
        let only_fusion = TrainableSet { prompts: false, fusion: true, adapter: false };
        assert!(only_fusion.contains("fusion.0.t2v.wq"));
        assert!(!only_fusion.contains("prompt.normal_prefix"));
        assert!(!TrainableSet::ALL.contains("visual.conv1"));
    }

    #[test]
    fn binder_reuses_bound_vars() {
        let mut store = ParamStore::new();
        store.insert("adapter.w_down", Mat::identity(2));
        let mut g = Graph::new();
        let mut b = Binder::new(&store, TrainableSet::ALL);
        let v1 = b.get(&mut g, "adapter.w_down");
        let v2 = b.get(&mut g, "adapter.w_down");
        assert_eq!(v1, v2);
        let s = g.sum(v1);
        let grads = g.backward(s);
        assert_eq!(b.collect(&grads)["adapter.w_down"], Mat::filled(2, 2, 1.0));
    }
}
