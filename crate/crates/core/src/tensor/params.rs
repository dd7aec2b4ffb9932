use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named model parameter with a trainable flag.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named parameter tensors with per-tensor freeze flags.
///
/// The `tag` distinguishes parameter sets sharing a graph (e.g. the frozen
/// downstream model vs the trainable embedder). Names are unique within a
/// set; iteration order is the sorted name order, which keeps serialization
/// and optimizer updates deterministic.
#[derive(Clone, Debug)]
pub struct ParamSet<F> {
    tag: String,
    params: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new(tag: impl Into<String>) -> Self {
        ParamSet { tag: tag.into(), params: BTreeMap::new() }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn set_tag(&mut self, tag: impl Into<String>) {
        self.tag = tag.into();
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<F> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}` in set `{}`", self.tag))
            .value
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let tag = self.tag.clone();
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}` in set `{tag}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Mark every tensor frozen (no gradient accumulation).
    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| !p.trainable)
    }

    pub fn to_f64_set(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new(self.tag.clone());
        for (name, p) in &self.params {
            out.params.insert(
                name.clone(),
                Param { value: p.value.to_f64_tensor(), trainable: p.trainable },
            );
        }
        out
    }

    pub fn to_f32_set(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new(self.tag.clone());
        for (name, p) in &self.params {
            out.params.insert(
                name.clone(),
                Param { value: p.value.to_f32_tensor(), trainable: p.trainable },
            );
        }
        out
    }
}
