use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{Modality, Preprocessing, SyntheticSpec};
use crate::encoder::{ImuEncoderConfig, VideoEncoderConfig};
use crate::error::{Error, Result};
use crate::params::hex;
use crate::training::{Condition, DatasetKind, TrainHyperparams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExperimentKind {
    Baseline,
    RatioSweep,
    ZeroShot,
}

/// Modality whose training data loses the hidden classes. `BOTH` runs the
/// IMU-masked and the video-masked experiments one after the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskedModality {
    #[serde(rename = "IMU")]
    Imu,
    #[serde(rename = "VIDEO")]
    Video,
    #[serde(rename = "BOTH")]
    Both,
}

impl MaskedModality {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            MaskedModality::Imu => vec![Modality::Imu],
            MaskedModality::Video => vec![Modality::Video],
            MaskedModality::Both => vec![Modality::Imu, Modality::Video],
        }
    }
}

/// A registry name plus the encoder's JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: String,
    #[serde(default)]
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; when absent the `FUSEHAR_DATA_ROOT` variable is used.
    pub root: Option<PathBuf>,
    /// Loader options (for `SYNTHETIC`, the generator spec).
    pub options: Value,
    /// On-disk cache of preprocessed samples.
    pub cache_dir: Option<PathBuf>,
    /// In-memory budget for preprocessed samples.
    pub memory_budget_mb: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSweepConfig {
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub hidden_counts: Vec<usize>,
    pub masked_modality: MaskedModality,
}

/// Everything one experiment needs. Parsed configs are merged over the
/// dataset preset, so every field has a value after parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub modality_condition: Condition,
    pub experiment: ExperimentKind,
    pub data: DataConfig,
    pub imu_encoder: EncoderSpec,
    pub video_encoder: EncoderSpec,
    pub head_hidden_dim: usize,
    pub stage1_imu: TrainHyperparams,
    pub stage1_video: TrainHyperparams,
    pub stage2: TrainHyperparams,
    pub ratio_sweep: RatioSweepConfig,
    pub zero_shot: ZeroShotConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Defaults for a dataset: its hyperparameter presets, encoders sized for
    /// its inputs, and the standard sweep and zero-shot settings.
    pub fn preset(dataset: DatasetKind) -> Self {
        let (data_options, imu, video, hidden) = match dataset {
            DatasetKind::Synthetic => {
                let spec = SyntheticSpec::default();
                let (t, h, w) = spec.clip_shape;
                (
                    serde_json::to_value(&spec).expect("serialisable"),
                    ImuEncoderConfig {
                        in_channels: spec.imu_channels,
                        block_channels: [8, 16, 32],
                        kernel_sizes: [9, 7, 5],
                        min_input_len: spec.seq_len,
                        ..Default::default()
                    },
                    EncoderSpec {
                        kind: "mini3d".into(),
                        config: serde_json::to_value(VideoEncoderConfig {
                            input_shape: (t, h, w),
                            block_channels: [8, 8, 16],
                            ..Default::default()
                        })
                        .expect("serialisable"),
                    },
                    64,
                )
            }
            DatasetKind::UtdMhad | DatasetKind::Mmact => {
                let prep = if dataset == DatasetKind::UtdMhad {
                    Preprocessing::utd_mhad()
                } else {
                    Preprocessing::mmact()
                };
                let channels = if dataset == DatasetKind::UtdMhad { 6 } else { 12 };
                (
                    json!({ "preprocessing": prep }),
                    ImuEncoderConfig {
                        in_channels: channels,
                        min_input_len: prep.sensor_len,
                        ..Default::default()
                    },
                    EncoderSpec {
                        kind: "s3d".into(),
                        config: serde_json::to_value(VideoEncoderConfig {
                            input_shape: (prep.video_frames, prep.video_size.0, prep.video_size.1),
                            ..VideoEncoderConfig::s3d()
                        })
                        .expect("serialisable"),
                    },
                    512,
                )
            }
        };
        Self {
            dataset,
            modality_condition: Condition::Fused,
            experiment: ExperimentKind::Baseline,
            data: DataConfig {
                root: None,
                options: data_options,
                cache_dir: None,
                memory_budget_mb: 2048,
            },
            imu_encoder: EncoderSpec {
                kind: "imu_cnn1d".into(),
                config: serde_json::to_value(imu).expect("serialisable"),
            },
            video_encoder: video,
            head_hidden_dim: hidden,
            stage1_imu: TrainHyperparams::preset(dataset, Condition::Imu),
            stage1_video: TrainHyperparams::preset(dataset, Condition::Video),
            stage2: TrainHyperparams::preset(dataset, Condition::Fused),
            ratio_sweep: RatioSweepConfig {
                ratios: vec![0.25, 0.5, 0.75, 1.0],
                seeds: vec![0, 1, 2],
            },
            zero_shot: ZeroShotConfig {
                hidden_counts: vec![1, 3, 5],
                masked_modality: MaskedModality::Imu,
            },
            output_dir: PathBuf::from("runs/experiment"),
            seed: 0,
        }
    }

    /// Merges `value` over the preset named by its `dataset` field and
    /// validates the result. Error messages carry the offending field path.
    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let dataset: DatasetKind = match obj.get("dataset") {
            Some(d) => serde_json::from_value(d.clone()).map_err(|e| Error::Config(format!("dataset: {e}")))?,
            None => return Err(Error::Config("dataset: missing field".into())),
        };
        let mut merged = serde_json::to_value(Self::preset(dataset)).expect("serialisable");
        merge(&mut merged, value);
        let cfg: Self = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        Self::from_value(&value)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => Error::Config(format!("{name}: {other}")),
            })
        };
        field("stage1_imu", self.stage1_imu.validate())?;
        field("stage1_video", self.stage1_video.validate())?;
        field("stage2", self.stage2.validate())?;
        if self.head_hidden_dim == 0 {
            return Err(Error::Config("head_hidden_dim: must be ≥ 1".into()));
        }
        if self.ratio_sweep.ratios.is_empty() || self.ratio_sweep.seeds.is_empty() {
            return Err(Error::Config(
                "ratio_sweep: needs at least one ratio and one seed".into(),
            ));
        }
        if let Some(r) = self.ratio_sweep.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("ratio_sweep.ratios: {r} not in (0, 1]")));
        }
        if self.zero_shot.hidden_counts.is_empty() {
            return Err(Error::Config("zero_shot.hidden_counts: must not be empty".into()));
        }
        if self.experiment == ExperimentKind::ZeroShot && self.modality_condition != Condition::Fused {
            return Err(Error::Config(
                "modality_condition: zero-shot experiments train both encoders and need FUSED".into(),
            ));
        }
        if self.dataset == DatasetKind::Synthetic {
            let spec: SyntheticSpec = serde_json::from_value(self.data.options.clone())
                .map_err(|e| Error::Config(format!("data.options: {e}")))?;
            field("data.options", spec.validate())?;
        }
        Ok(())
    }

    /// SHA-256 of the config without its output directory, so the same
    /// experiment written to two places hashes the same.
    pub fn config_hash(&self) -> String {
        let mut v = self.to_value();
        v.as_object_mut().expect("object").remove("output_dir");
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("serialisable")))
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Applies `key.path=value` to a JSON document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` has an empty segment")));
    }
    let mut node = doc;
    for k in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!(
                "override `{path}`: `{k}` is not inside an object"
            )));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!(
            "override `{path}` does not address an object field"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_the_dataset() {
        let cfg = ExperimentConfig::from_json_str(r#"{"dataset": "UTD_MHAD"}"#).unwrap();
        assert_eq!(
            (cfg.stage2.learning_rate, cfg.stage2.weight_decay, cfg.stage2.batch_size),
            (5e-4, 5e-6, 16)
        );
        assert_eq!(cfg.video_encoder.kind, "s3d");
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg =
            ExperimentConfig::from_json_str(r#"{"dataset": "SYNTHETIC", "seed": 4, "stage2": {"max_epochs": 3}}"#)
                .unwrap();
        let again = ExperimentConfig::from_value(&cfg.to_value()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_value(), cfg.to_value());
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json_str(r#"{"dataset": "SYNTHETIC", "stage2": {"batch_size": "x"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage2.batch_size"), "{err}");
        let err = ExperimentConfig::from_json_str(r#"{"dataset": "SYNTHETIC", "stage2": {"lr": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage2") && err.contains("lr"), "{err}");
        let err = ExperimentConfig::from_json_str(r#"{"dataset": "SYNTHETIC", "stage1_imu": {"learning_rate": -1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage1_imu"), "{err}");
    }

    #[test]
    fn overrides_address_nested_fields() {
        let mut doc = json!({"dataset": "SYNTHETIC"});
        apply_override(&mut doc, "stage2.learning_rate=0.01").unwrap();
        apply_override(&mut doc, "zero_shot.masked_modality=VIDEO").unwrap();
        let cfg = ExperimentConfig::from_value(&doc).unwrap();
        assert_eq!(cfg.stage2.learning_rate, 0.01);
        assert_eq!(cfg.zero_shot.masked_modality, MaskedModality::Video);
        assert!(apply_override(&mut doc, "nokey").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::preset(DatasetKind::Synthetic);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
