use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::fnv1a64;

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pre-trained body θ; frozen during adapter training.
    Base,
    Lora,
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Named, ordered parameter collection. Insertion order is the checkpoint
/// order and the optimizer order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(false),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count of parameters in the given groups.
    pub fn count(&self, groups: &[ParamGroup]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Register every parameter as a graph leaf; gradients are tracked for
    /// the groups in `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let track = trainable.contains(&p.group);
                g.leaf(p.tensor.clone().with_requires_grad(track))
            })
            .collect()
    }

    /// Like [`ParamStore::bind`] with an explicit per-parameter mask.
    pub fn bind_mask(&self, g: &mut Graph, trainable: &[bool]) -> Vec<Var> {
        self.params
            .iter()
            .zip(trainable)
            .map(|(p, &track)| g.leaf(p.tensor.clone().with_requires_grad(track)))
            .collect()
    }

    pub fn checksum(&self, id: ParamId) -> u64 {
        fnv1a64(&self.params[id.0].tensor.to_le_bytes())
    }

    /// `(name, FNV-1a checksum)` for every parameter in `group`.
    pub fn checksums(&self, group: ParamGroup) -> Vec<(String, u64)> {
        self.ids()
            .filter(|&id| self.params[id.0].group == group)
            .map(|id| (self.params[id.0].name.clone(), self.checksum(id)))
            .collect()
    }

    /// Checksum over every parameter, in order.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            bytes.extend_from_slice(&p.tensor.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}
