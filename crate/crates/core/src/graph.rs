//! A tape bound to one parameter store for the duration of a forward pass.

use glied_tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub struct Graph<'s> {
    pub tape: Tape,
    binding: Binding,
    store: &'s ParamStore,
    training: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    /// Inference graph: parameters are constants and dropout is off.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::build(store, false, false, 0.0, 0)
    }

    /// Gradient-recording graph without dropout.
    pub fn trainable_eval(store: &'s ParamStore) -> Self {
        Self::build(store, true, false, 0.0, 0)
    }

    /// Training graph with dropout drawn from a seeded generator.
    pub fn train(store: &'s ParamStore, dropout: f64, seed: u64) -> Self {
        Self::build(store, true, true, dropout, seed)
    }

    fn build(store: &'s ParamStore, grads: bool, training: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            binding: Binding::new(store, grads),
            store,
            training,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.var(&mut self.tape, self.store, id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        Ok(self
            .tape
            .dropout(x, self.dropout, self.training, &mut self.rng)?)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        Ok(self.tape.backward(loss)?)
    }

    /// Parameter gradients after [`Graph::backward`], keyed by storage slot.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.binding.grads(&self.tape)
    }
}
