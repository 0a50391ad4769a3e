//! Named parameter trees.
//!
//! Names are dot-separated paths. Backbone entries live under
//! `backbone.<block>.conv.*` and `backbone.<block>.bn.*`; the classification
//! head lives under `head.*`. Batch-norm running statistics are stored
//! alongside the learnable tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Scalar, Tensor};

pub mod names {
    pub const BACKBONE_PREFIX: &str = "backbone.";
    pub const HEAD_PREFIX: &str = "head.";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn conv_weight(block: usize) -> String {
        format!("backbone.{block}.conv.weight")
    }

    pub fn conv_bias(block: usize) -> String {
        format!("backbone.{block}.conv.bias")
    }

    pub fn bn_gamma(block: usize) -> String {
        format!("backbone.{block}.bn.weight")
    }

    pub fn bn_beta(block: usize) -> String {
        format!("backbone.{block}.bn.bias")
    }

    pub fn bn_running_mean(block: usize) -> String {
        format!("backbone.{block}.bn.running_mean")
    }

    pub fn bn_running_var(block: usize) -> String {
        format!("backbone.{block}.bn.running_var")
    }

    pub fn bn_entries(block: usize) -> [String; 4] {
        [
            bn_gamma(block),
            bn_beta(block),
            bn_running_mean(block),
            bn_running_var(block),
        ]
    }

    pub fn is_bn(name: &str) -> bool {
        name.starts_with(super::names::BACKBONE_PREFIX) && name.contains(".bn.")
    }

    pub fn is_conv(name: &str) -> bool {
        name.starts_with(super::names::BACKBONE_PREFIX) && name.contains(".conv.")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, AnyTensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<AnyTensor>) {
        self.entries.insert(name.into(), tensor.into());
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingState(format!("parameter tree has no entry `{name}`")))
    }

    pub fn require_as<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.require(name).map(AnyTensor::to)
    }

    pub fn remove(&mut self, name: &str) -> Option<AnyTensor> {
        self.entries.remove(name)
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

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn backbone(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.iter().filter(|(k, _)| k.starts_with(names::BACKBONE_PREFIX))
    }

    pub fn head(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.iter().filter(|(k, _)| k.starts_with(names::HEAD_PREFIX))
    }

    /// Copy restricted to entries whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamTree {
        ParamTree {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites or adds every entry of `other`.
    pub fn extend_from(&mut self, other: &ParamTree) {
        for (k, v) in other.iter() {
            self.entries.insert(k.to_string(), v.clone());
        }
    }

    /// Copy with every tensor converted to `T`.
    pub fn cast<T: Scalar>(&self) -> ParamTree {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), AnyTensor::from(v.to::<T>())))
                .collect(),
        }
    }

    /// Bitwise equality including dtypes.
    pub fn bit_eq(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}
