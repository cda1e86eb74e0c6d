//! Parameter storage shared by every encoder and head.
//!
//! Parameters are organised in named groups. Trainability is a property of a
//! group, which is the granularity the two-stage procedure freezes at. Each
//! group carries trainable tensors plus optional buffers (normalisation
//! statistics) that no optimizer ever touches.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGroup {
    pub trainable: bool,
    pub tensors: IndexMap<String, ArrayD<f64>>,
    pub buffers: IndexMap<String, ArrayD<f64>>,
}

impl ParamGroup {
    pub fn new(trainable: bool) -> Self {
        Self {
            trainable,
            ..Default::default()
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum::<usize>() + self.buffers.values().map(|t| t.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    groups: IndexMap<String, ParamGroup>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn groups(&self) -> impl Iterator<Item = (&String, &ParamGroup)> {
        self.groups.iter()
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamGroup)> {
        self.groups.iter_mut()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.get_mut(name)
    }

    pub fn group_or_insert(&mut self, name: &str, trainable: bool) -> &mut ParamGroup {
        self.groups
            .entry(name.to_string())
            .or_insert_with(|| ParamGroup::new(trainable))
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.groups.get(group).is_some_and(|g| g.trainable)
    }

    /// Looks up a tensor or buffer.
    pub fn get(&self, group: &str, name: &str) -> Result<&ArrayD<f64>> {
        let g = self.groups.get(group).ok_or_else(|| Error::UnknownGroup {
            name: group.to_string(),
            valid: self.group_names(),
        })?;
        g.tensors
            .get(name)
            .or_else(|| g.buffers.get(name))
            .ok_or_else(|| Error::MissingTensor(format!("{group}.{name}")))
    }

    pub fn num_values(&self) -> usize {
        self.groups.values().map(ParamGroup::num_values).sum()
    }

    /// Marks exactly `names` trainable and freezes every other group.
    pub fn set_trainable(&mut self, names: &[String]) -> Result<TrainabilityMask> {
        for n in names {
            if !self.groups.contains_key(n) {
                return Err(Error::UnknownGroup {
                    name: n.clone(),
                    valid: self.group_names(),
                });
            }
        }
        for (name, g) in self.groups.iter_mut() {
            g.trainable = names.iter().any(|n| n == name);
        }
        Ok(self.trainability())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for g in self.groups.values_mut() {
            g.trainable = trainable;
        }
    }

    pub fn trainability(&self) -> TrainabilityMask {
        TrainabilityMask(self.groups.iter().map(|(n, g)| (n.clone(), g.trainable)).collect())
    }

    /// SHA-256 over every tensor and buffer of a group, in storage order.
    pub fn group_digest(&self, group: &str) -> Result<String> {
        let g = self.groups.get(group).ok_or_else(|| Error::UnknownGroup {
            name: group.to_string(),
            valid: self.group_names(),
        })?;
        let mut hasher = Sha256::new();
        for (name, t) in g.tensors.iter().chain(g.buffers.iter()) {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.groups
            .keys()
            .map(|k| (k.clone(), self.group_digest(k).expect("group exists")))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .values()
            .flat_map(|g| g.tensors.values().chain(g.buffers.values()))
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-group trainable flags, covering every group exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainabilityMask(pub BTreeMap<String, bool>);

impl TrainabilityMask {
    pub fn trainable_groups(&self) -> Vec<&str> {
        self.0.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str()).collect()
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.0.values().all(|t| !t)
    }
}

/// Gradients keyed by (group, tensor). Only trainable groups appear.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: IndexMap<(String, String), ArrayD<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, group: &str, name: &str, grad: ArrayD<f64>) {
        match self.grads.get_mut(&(group.to_string(), name.to_string())) {
            Some(g) => *g += &grad,
            None => {
                self.grads.insert((group.to_string(), name.to_string()), grad);
            }
        }
    }

    pub fn get(&self, group: &str, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(&(group.to_string(), name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ArrayD<f64>)> {
        self.grads.iter().map(|((g, n), a)| (g.as_str(), n.as_str(), a))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.group_or_insert("a", true)
            .tensors
            .insert("w".into(), ArrayD::zeros(IxDyn(&[2, 2])));
        p.group_or_insert("b", true)
            .tensors
            .insert("w".into(), ArrayD::ones(IxDyn(&[3])));
        p
    }

    #[test]
    fn set_trainable_freezes_the_rest() {
        let mut p = sample();
        let mask = p.set_trainable(&["b".to_string()]).unwrap();
        assert_eq!(mask.trainable_groups(), vec!["b"]);
        assert!(!p.is_trainable("a"));
    }

    #[test]
    fn unknown_group_lists_valid_names() {
        let mut p = sample();
        let err = p.set_trainable(&["zzz".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zzz") && msg.contains("a, b"), "{msg}");
    }

    #[test]
    fn digest_tracks_values() {
        let mut p = sample();
        let before = p.group_digest("a").unwrap();
        assert_eq!(before, p.group_digest("a").unwrap());
        p.group_mut("a").unwrap().tensors["w"][[0, 0]] = 1e-300;
        assert_ne!(before, p.group_digest("a").unwrap());
    }
}
