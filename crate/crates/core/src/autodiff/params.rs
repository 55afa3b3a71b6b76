use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{invalid_arg, Result};

/// Weight initialisation recorded in checkpoint manifests.
pub const INIT_SCHEME: &str = "kaiming_uniform_fan_in(leaky_slope=0.2), zero bias";

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.entries.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// `[fan_in, fan_out]` weight drawn from U(±sqrt(6 / ((1 + 0.2²) fan_in))).
    pub fn init_weight<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        if fan_in == 0 || fan_out == 0 {
            return invalid_arg("weight dimensions must be positive");
        }
        let bound = (6.0 / ((1.0 + 0.04) * fan_in as f64)).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?);
        Ok(())
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}
