//! Named parameter and buffer storage shared by every model component.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TextEmbedding,
    Tokenizer,
    Encoder,
    Synthesis,
    Fusion,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::TextEmbedding,
        Component::Tokenizer,
        Component::Encoder,
        Component::Synthesis,
        Component::Fusion,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor,
    /// Buffers (normalization running statistics) are stored and
    /// checkpointed like parameters but never receive gradients.
    pub buffer: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    frozen: [bool; 5],
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, component: Component, tensor: Tensor) -> ParamId {
        self.push(name, component, tensor, false)
    }

    pub fn add_buffer(&mut self, name: &str, component: Component, tensor: Tensor) -> ParamId {
        self.push(name, component, tensor, true)
    }

    fn push(&mut self, name: &str, component: Component, tensor: Tensor, buffer: bool) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name: name.to_string(), component, tensor, buffer });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, component: Component, frozen: bool) {
        self.frozen[component.index()] = frozen;
    }

    pub fn is_frozen(&self, component: Component) -> bool {
        self.frozen[component.index()]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        !e.buffer && !self.is_frozen(e.component)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.get(id).numel()).sum()
    }

    /// Rounds every stored value to the nearest `f32`, the checkpoint precision.
    pub fn quantize_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Uniform Glorot initialisation for a `fan_in x fan_out` matrix.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, shape, limit)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data)
}
