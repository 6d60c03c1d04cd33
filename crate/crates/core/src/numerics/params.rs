use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DenseArray;
use crate::error::{contract, Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-filled parameter.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name.into(), DenseArray::zeros(shape))
    }

    pub fn insert(&mut self, name: String, value: DenseArray) -> Result<ParamId> {
        contract!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    /// Fills every entry i.i.d. uniform on `[lo, hi]`, in registration order.
    pub fn init_uniform(&mut self, lo: f64, hi: f64, seed: u64) -> Result<()> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "uniform init needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for value in &mut self.values {
            for v in value.data_mut() {
                *v = rng.random_range(lo..=hi);
            }
        }
        Ok(())
    }

    /// Replaces every value with the matching entry of `other`. Names and shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        contract!(
            self.len() == other.len(),
            "parameter count mismatch: {} vs {}",
            self.len(),
            other.len()
        );
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            contract!(
                self.values[i].shape() == other.values[j].shape(),
                "shape mismatch for `{name}`: {:?} vs {:?}",
                self.values[i].shape(),
                other.values[j].shape()
            );
            self.values[i] = other.values[j].clone();
        }
        Ok(())
    }
}

/// Gradient slots aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<DenseArray>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: store
                .values
                .iter()
                .map(|v| DenseArray::zeros(v.shape().to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.slots[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.slots[id.0]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[DenseArray] {
        &self.slots
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.slots[id.0].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        contract!(
            self.slots.len() == other.slots.len(),
            "gradient slot count mismatch"
        );
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            contract!(a.shape() == b.shape(), "gradient shape mismatch");
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in &mut self.slots {
            for v in s.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .map(DenseArray::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(DenseArray::is_finite)
    }
}
