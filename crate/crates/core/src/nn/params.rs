use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::BnObservation;
use super::tensor::Tensor;
use crate::rng::substream;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`ParamStore`]; used only to route
/// gradients, never serialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Named {
    name: String,
    value: Tensor,
}

/// Trainable parameters plus non-trainable running buffers of one model
/// component.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_id")]
    id: StoreId,
    prefix: String,
    params: Vec<Named>,
    buffers: Vec<Named>,
}

fn fresh_id() -> StoreId {
    StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so their gradients never alias.
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            prefix: self.prefix.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.buffers == other.buffers
    }
}

impl ParamStore {
    pub fn new(prefix: &str) -> Self {
        Self {
            id: fresh_id(),
            prefix: prefix.to_string(),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.params.push(Named {
            name: format!("{}.{}", self.prefix, name),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.buffers.push(Named {
            name: format!("{}.{}", self.prefix, name),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    /// He-normal initialised convolution weight `[out, in, k, k]`.
    ///
    /// The draw is keyed by the parameter's full name so adding or removing
    /// unrelated layers never shifts another layer's initial values.
    pub fn add_conv_weight(&mut self, name: &str, seed: u64, out_c: usize, in_c: usize, k: usize) -> ParamId {
        let full = format!("{}.{}", self.prefix, name);
        let fan_in = (in_c * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = substream(seed, "init", &full);
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..out_c * in_c * k * k).map(|_| normal.sample(&mut rng)).collect();
        self.add(name, Tensor::from_vec([out_c, in_c, k, k], data))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// Fold training-mode batch statistics belonging to this store into
    /// its running buffers; observations for other stores are ignored.
    pub fn apply_observations(&mut self, observations: &[BnObservation]) {
        for obs in observations.iter().filter(|o| o.store == self.id) {
            let m = obs.momentum;
            for (r, &b) in self.buffers[obs.mean_buf.0].value.data_mut().iter_mut().zip(&obs.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in self.buffers[obs.var_buf.0].value.data_mut().iter_mut().zip(&obs.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Copy every parameter and buffer value from `other`, which must have
    /// the same names and shapes in the same order. Keeps this store's id.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), String> {
        let layout =
            |v: &[Named]| -> Vec<(String, [usize; 4])> { v.iter().map(|n| (n.name.clone(), n.value.dims())).collect() };
        if layout(&self.params) != layout(&other.params) || layout(&self.buffers) != layout(&other.buffers) {
            return Err(format!(
                "store layout differs: {} params/{} buffers vs {} params/{} buffers",
                self.params.len(),
                self.buffers.len(),
                other.params.len(),
                other.buffers.len()
            ));
        }
        self.params.clone_from(&other.params);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }

    /// Combined bit-level checksum of parameters and buffers.
    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .chain(&self.buffers)
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.value.checksum())
    }

    pub fn param_checksum(&self, ids: &[ParamId]) -> u64 {
        ids.iter()
            .fold(0u64, |acc, id| acc.rotate_left(7) ^ self.value(*id).checksum())
    }

    pub fn buffer_checksum(&self, ids: &[BufferId]) -> u64 {
        ids.iter()
            .fold(0u64, |acc, id| acc.rotate_left(7) ^ self.buffer(*id).checksum())
    }
}
