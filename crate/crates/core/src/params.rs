//! Flat parameter storage.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>`, addressed by a
//! `Slot` handle and registered under a canonical path string. The flat
//! layout gives the optimizer, the checkpoint writer, and finite-difference
//! gradient checks a single coherent view of the model.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::HashMap;

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    slot: Slot,
}

/// Flat store of all learnable parameters, keyed by canonical path strings
/// such as `backbone.fusion.layer0.mixer.w_q`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    data: Vec<f64>,
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a zero-initialized tensor.
    pub fn alloc(&mut self, name: &str, len: usize) -> Slot {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter path {name}"
        );
        let slot = Slot {
            offset: self.data.len(),
            len,
        };
        self.data.resize(self.data.len() + len, 0.0);
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            slot,
        });
        slot
    }

    /// Register a tensor filled uniformly from [-bound, bound].
    pub fn alloc_uniform(&mut self, name: &str, len: usize, bound: f64, rng: &mut Rng) -> Slot {
        let slot = self.alloc(name, len);
        for v in self.get_mut(slot) {
            *v = rng.uniform(bound);
        }
        slot
    }

    /// Register a tensor filled with a constant.
    pub fn alloc_const(&mut self, name: &str, len: usize, value: f64) -> Slot {
        let slot = self.alloc(name, len);
        self.get_mut(slot).fill(value);
        slot
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.data[slot.offset..slot.offset + slot.len]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.offset..slot.offset + slot.len]
    }

    pub fn slot_by_name(&self, name: &str) -> Option<Slot> {
        self.by_name.get(name).map(|&i| self.entries[i].slot)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (path, slot) pairs in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.slot))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Overwrite the tensor registered under `name`.
    pub fn load_named(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let slot = self
            .slot_by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter path `{name}`")))?;
        if slot.len != values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has {} values, expected {}",
                values.len(),
                slot.len
            )));
        }
        self.get_mut(slot).copy_from_slice(values);
        Ok(())
    }

    /// Round every parameter to f32 precision, the storage precision of
    /// checkpoints. Loading a checkpoint yields exactly such a store.
    pub fn quantize_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Gradient buffer matching a store's flat layout.
#[derive(Debug, Clone)]
pub struct GradBuf {
    data: Vec<f64>,
}

impl GradBuf {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: vec![0.0; store.len()],
        }
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.data[slot.offset..slot.offset + slot.len]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.offset..slot.offset + slot.len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn reset(&mut self) {
        self.data.fill(0.0);
    }

    /// self += other, in flat index order.
    pub fn add_assign(&mut self, other: &GradBuf) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.data.iter_mut() {
            *v *= alpha;
        }
    }
}
