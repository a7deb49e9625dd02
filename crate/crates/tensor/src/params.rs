//! Named parameter storage with alias support.
//!
//! A parameter lives in exactly one storage slot. Additional names can be
//! attached to an existing slot with [`ParamStore::alias`]; every name then
//! resolves to the same [`ParamId`], so weight tying is structural rather
//! than a convention kept in sync by hand.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    canonical: Vec<String>,
    names: BTreeMap<String, ParamId>,
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.tensors.push(value);
        self.canonical.push(name.clone());
        self.grads.push(None);
        self.names.insert(name, id);
        Ok(id)
    }

    /// Makes `alias` resolve to the same storage as `target`.
    pub fn alias(&mut self, alias: impl Into<String>, target: &str) -> Result<ParamId> {
        let alias = alias.into();
        let id = self.require(target)?;
        if self.names.contains_key(&alias) {
            return Err(TensorError::Contract(format!("duplicate parameter `{alias}`")));
        }
        self.names.insert(alias, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.require(name)?))
    }

    pub fn canonical_name(&self, id: ParamId) -> &str {
        &self.canonical[id.0]
    }

    /// Number of storage slots (shared weights count once).
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count, shared weights counted once.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `(canonical name, tensor)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.canonical[i].as_str(), t))
    }

    /// `(alias, canonical)` pairs, sorted by alias.
    pub fn aliases(&self) -> impl Iterator<Item = (&str, &str)> {
        self.names
            .iter()
            .filter(|(n, id)| self.canonical[id.0] != **n)
            .map(|(n, id)| (n.as_str(), self.canonical[id.0].as_str()))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => {
                if g.shape() != self.tensors[id.0].shape() {
                    return Err(TensorError::Shape {
                        op: "accumulate_grad",
                        detail: format!("{:?} vs {:?}", g.shape(), self.tensors[id.0].shape()),
                    });
                }
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    /// Gradients for every slot, zero-filled where none accumulated.
    pub fn grads_or_zero(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&self.grads)
            .map(|(t, g)| g.clone().unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect()
    }
}

/// Lazily places parameters on a tape, one leaf per storage slot.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    /// `trainable` controls whether bound leaves record gradients.
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| {
            let value = store.get(id).clone();
            if self.trainable {
                tape.leaf(value)
            } else {
                tape.constant(value)
            }
        })
    }

    /// Tape gradients of bound parameters, keyed by storage slot.
    pub fn grads<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.vars
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.and_then(|v| tape.grad(v)).map(|g| (ParamId(i), g)))
    }

    /// Moves tape gradients of every bound parameter into the store.
    pub fn collect_grads(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (i, var) in self.vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| tape.grad(v)) {
                store.accumulate_grad(ParamId(i), g)?;
            }
        }
        Ok(())
    }
}
