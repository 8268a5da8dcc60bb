//! Layers, parameter storage and the Adam optimizer.

mod adam;
mod layers;
mod spectral;

pub use adam::Adam;
pub use layers::{Conv3d, Conv3dSpec, ConvTranspose3d, Linear, Norm3d, NormKind, ResidualBlock};
pub use spectral::SpectralNorm;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamKey, Real, Tape, Tensor, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors owned by one network. Trainable entries have
/// `requires_grad` set; the rest are buffers (running statistics, power
/// iteration vectors).
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value.with_requires_grad(trainable));
        ParamId(self.tensors.len() - 1)
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// While frozen, bound parameters are recorded as constants.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        let t = &self.tensors[id.0];
        let key = ParamKey {
            store: self.uid,
            index: id.0,
        };
        tape.param(key, t, t.requires_grad() && !self.frozen)
    }

    /// Adds every gradient that belongs to this store into its grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in grads.params() {
            if key.store == self.uid {
                self.tensors[key.index].accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// True when some trainable tensor carries a gradient.
    pub fn has_grads(&self) -> bool {
        self.tensors.iter().any(|t| t.grad().is_some())
    }

    /// Replaces the data of the entry called `name`, keeping its shape.
    pub fn load(&mut self, name: &str, data: &[Real]) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        let t = &mut self.tensors[idx];
        if t.numel() != data.len() {
            return Err(Error::Format(format!(
                "parameter `{name}` expects {} values, found {}",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Copies all tensor data from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
