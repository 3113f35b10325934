//! Named parameter storage and the per-step binding of parameters onto a tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Installs one gradient per parameter, in registration order.
    pub fn set_grads(&mut self, grads: Vec<Vec<f64>>) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Overwrites every parameter value with `other`'s (same layout).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} parameters vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameters for one forward (and backward) pass.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// Parameters are bound as gradient-tracking leaves.
    pub fn training(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    /// Parameters are bound as constants; nothing tracks gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'s ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape handle of a parameter, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone().with_grad(self.track);
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter after `tape.backward`, zeros for
    /// parameters that did not influence the loss.
    pub fn param_grads(&self) -> Result<Vec<Vec<f64>>> {
        self.store
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => self.tape.grad_or_zeros(v).ok_or_else(|| {
                    Error::State("parameter gradients requested before backward".into())
                }),
                None => Ok(vec![0.0; self.store.get(id).numel()]),
            })
            .collect()
    }
}
