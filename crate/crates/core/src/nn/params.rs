use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter storage shared by every model of a bundle.
///
/// Names are dotted paths (`vae.encoder.conv1.weight`) and double as the
/// checkpoint blob names. Values are kept `f32`-representable so checkpoints
/// round-trip exactly.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter `{name}`")));
        }
        value.round_f32();
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    /// Uniform init in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::rand_uniform(shape, -bound, bound, rng))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_value(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        self.entries[id.0].value.same_shape(&value)?;
        value.round_f32();
        self.entries[id.0].value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Mark exactly the parameters whose name satisfies `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(&e.name);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Digest over every parameter whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .fold(0u64, |acc, e| acc.rotate_left(7) ^ e.value.digest())
    }
}
