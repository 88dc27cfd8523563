use std::collections::{BTreeMap, BTreeSet};

use super::rng::RngState;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters with per-name freezing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .values
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    /// Copies every entry under `prefix` from `other`, replacing existing ones.
    pub fn absorb_prefix(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.values.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.values.insert(k.clone(), v.clone());
            if other.is_frozen(k) {
                self.frozen.insert(k.clone());
            }
            n += 1;
        }
        n
    }

    /// Sub-store with the entries under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.absorb_prefix(self, prefix);
        out
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.values.retain(|k, _| !k.starts_with(prefix));
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    /// True if both stores hold the same names with bit-identical payloads.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }
}

/// A forward pass: tape plus the parameters it reads.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    /// When false every parameter is bound without gradient tracking.
    pub train: bool,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            train: true,
        }
    }

    pub fn inference(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            train: false,
        }
    }

    /// Binds a named parameter; panics if the name is unknown.
    pub fn p(&self, name: &str) -> Var<'t> {
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("parameter `{name}` not initialized"));
        let rg = self.train && !self.store.is_frozen(name);
        self.tape.param(name, value, rg)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// Parameter initialization helpers shared by the layer modules.
pub fn init_normal(
    store: &mut ParamStore,
    rng: &mut RngState,
    name: &str,
    shape: &[usize],
    std: f64,
) {
    store.insert(name, rng.normal_tensor(shape, std));
}

pub fn init_const(store: &mut ParamStore, name: &str, shape: &[usize], v: f64) {
    store.insert(name, Tensor::full(shape, v));
}
