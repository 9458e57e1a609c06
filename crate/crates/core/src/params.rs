//! Flat named parameter collections and their gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor, Tensors};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors.iter().fold(0u64, |h, (name, t)| {
            let name_hash = name.bytes().fold(h, |h, b| h.rotate_left(5) ^ b as u64);
            name_hash.rotate_left(13) ^ t.checksum()
        })
    }

    pub fn set_all(&mut self, value: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = value);
        }
    }

    /// Declares one graph input per tensor, named `prefix + name`.
    pub fn declare(&self, g: &mut Graph, prefix: &str, requires_grad: bool) -> ParamNodes {
        let nodes = self
            .tensors
            .keys()
            .map(|name| (name.clone(), g.input(&format!("{prefix}{name}"), requires_grad)))
            .collect();
        ParamNodes { nodes }
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> Result<()> {
        for (name, t) in &self.tensors {
            g.bind(&format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// As named graph inputs (`prefix + name`).
    pub fn to_inputs(&self, prefix: &str) -> Tensors {
        self.tensors
            .iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    pub fn grads(&self) -> &BTreeMap<String, Tensor> {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
    }

    /// Adds graph gradients named `prefix + name` into the buffers.
    pub fn accumulate(&mut self, prefix: &str, grads: &Tensors) -> Result<()> {
        if self.grads.len() != self.tensors.len() {
            self.zero_grads();
        }
        for (full, g) in grads {
            let Some(name) = full.strip_prefix(prefix) else { continue };
            let buf = self
                .grads
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if buf.shape() != g.shape() {
                return Err(invalid(format!("gradient shape mismatch for {name}")));
            }
            for (b, x) in buf.data_mut().iter_mut().zip(g.data()) {
                *b += x;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, k: f64) {
        for t in self.grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Graph node ids of a declared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not declared"))
    }
}

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
