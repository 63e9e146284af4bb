//! Named parameter storage, bound onto a tape once per forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// `[fan_in, fan_out]` weight with N(0, 0.02²) entries.
    pub fn linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn([fan_in, fan_out], 0.02, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Replaces all values, checking names and shapes against this store.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if name != &self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    name,
                    t.shape()
                )));
            }
        }
        self.tensors = entries.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients for every parameter, zero where none flowed.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}
