//! Named dataset sources, selected at runtime by the experiment config.

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{generate_synthetic_dataset, mmact, utd_mhad, Dataset, Preprocessing, SyntheticSpec};
use crate::error::{Error, Result};

/// Options shared by the real-archive loaders.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Fail on the first corrupt or incomplete sample instead of skipping it.
    pub strict: bool,
    /// Overrides the dataset's canonical preprocessing.
    pub preprocessing: Option<Preprocessing>,
    /// Pins the class-id order (MMAct only).
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct SourceRequest {
    pub root: Option<PathBuf>,
    /// Source-specific options, e.g. a [`LoadOptions`] or a [`SyntheticSpec`].
    pub options: Value,
    pub seed: u64,
}

pub trait DatasetSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn load(&self, request: &SourceRequest) -> Result<Dataset>;
}

fn options<T: serde::de::DeserializeOwned + Default>(v: &Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("dataset options: {e}")))
}

fn root(req: &SourceRequest, name: &str) -> Result<PathBuf> {
    req.root
        .clone()
        .ok_or_else(|| Error::Config(format!("dataset `{name}` needs a data root")))
}

pub struct UtdMhadSource;

impl DatasetSource for UtdMhadSource {
    fn name(&self) -> &'static str {
        "utd_mhad"
    }

    fn load(&self, req: &SourceRequest) -> Result<Dataset> {
        utd_mhad::load_utd_mhad(&root(req, self.name())?, &options(&req.options)?)
    }
}

pub struct MmactSource;

impl DatasetSource for MmactSource {
    fn name(&self) -> &'static str {
        "mmact"
    }

    fn load(&self, req: &SourceRequest) -> Result<Dataset> {
        mmact::load_mmact(&root(req, self.name())?, &options(&req.options)?)
    }
}

pub struct SyntheticSource;

impl DatasetSource for SyntheticSource {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn load(&self, req: &SourceRequest) -> Result<Dataset> {
        let spec: SyntheticSpec = options(&req.options)?;
        generate_synthetic_dataset(&spec, req.seed)
    }
}

pub struct DatasetRegistry {
    sources: IndexMap<&'static str, Box<dyn DatasetSource>>,
}

impl Default for DatasetRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(UtdMhadSource));
        r.register(Box::new(MmactSource));
        r.register(Box::new(SyntheticSource));
        r
    }
}

impl DatasetRegistry {
    pub fn empty() -> Self {
        Self {
            sources: IndexMap::new(),
        }
    }

    pub fn register(&mut self, source: Box<dyn DatasetSource>) {
        self.sources.insert(source.name(), source);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.sources.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn DatasetSource> {
        let key = name.to_ascii_lowercase().replace('-', "_");
        self.sources
            .get(key.as_str())
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "dataset",
                name: name.to_string(),
                registered: self.names().iter().map(|s| s.to_string()).collect(),
            })
    }

    pub fn load(&self, name: &str, request: &SourceRequest) -> Result<Dataset> {
        self.get(name)?.load(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_names_case_insensitively() {
        let r = DatasetRegistry::default();
        assert_eq!(r.get("UTD-MHAD").unwrap().name(), "utd_mhad");
        let err = r.get("kinetics").err().unwrap().to_string();
        assert!(err.contains("synthetic"), "{err}");
    }

    #[test]
    fn synthetic_loads_from_json_options() {
        let r = DatasetRegistry::default();
        let req = SourceRequest {
            options: serde_json::json!({"num_imu_factors": 2, "num_video_factors": 2, "samples_per_class": 2}),
            seed: 3,
            ..Default::default()
        };
        let ds = r.load("synthetic", &req).unwrap();
        assert_eq!(ds.train.num_classes(), 4);
        assert_eq!(ds.train.len(), 8);
    }

    #[test]
    fn real_sources_need_a_root() {
        let r = DatasetRegistry::default();
        assert!(matches!(
            r.load("mmact", &SourceRequest::default()),
            Err(Error::Config(_))
        ));
    }
}
