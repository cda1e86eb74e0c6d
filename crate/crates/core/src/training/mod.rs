//! Stage-1 pre-training of each encoder, stage-2 joint fine-tuning, the
//! AdamW optimizer, and the per-dataset hyperparameter presets.

mod optim;
mod stages;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{optimizer_step, AdamState, BETA1, BETA2, EPSILON};
pub use stages::{assemble_inputs, train_stage1, train_stage2, AuditRecord, EpochRecord, Phase, TrainingRun};

use crate::data::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "UTD_MHAD")]
    UtdMhad,
    #[serde(rename = "MMACT")]
    Mmact,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::UtdMhad => "UTD_MHAD",
            DatasetKind::Mmact => "MMACT",
            DatasetKind::Synthetic => "SYNTHETIC",
        }
    }

    /// Name of the matching entry in the dataset registry.
    pub fn source_name(self) -> &'static str {
        match self {
            DatasetKind::UtdMhad => "utd_mhad",
            DatasetKind::Mmact => "mmact",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "UTD_MHAD" => Ok(DatasetKind::UtdMhad),
            "MMACT" => Ok(DatasetKind::Mmact),
            "SYNTHETIC" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Invalid(format!(
                "dataset `{s}` is not one of UTD_MHAD, MMACT, SYNTHETIC"
            ))),
        }
    }
}

/// Which modalities feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "IMU")]
    Imu,
    #[serde(rename = "VIDEO")]
    Video,
    #[serde(rename = "FUSED")]
    Fused,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Imu => "IMU",
            Condition::Video => "VIDEO",
            Condition::Fused => "FUSED",
        }
    }

    pub fn includes(self, m: Modality) -> bool {
        match self {
            Condition::Imu => m == Modality::Imu,
            Condition::Video => m == Modality::Video,
            Condition::Fused => true,
        }
    }

    pub fn single(m: Modality) -> Self {
        match m {
            Modality::Imu => Condition::Imu,
            Modality::Video => Condition::Video,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IMU" => Ok(Condition::Imu),
            "VIDEO" | "RGB" => Ok(Condition::Video),
            "FUSED" => Ok(Condition::Fused),
            _ => Err(Error::Invalid(format!(
                "condition `{s}` is not one of IMU, VIDEO, FUSED"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    /// Stratified fraction of the training split held out for early
    /// stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            max_epochs: 50,
            patience: Some(10),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainHyperparams {
    /// Learning rate, weight decay and batch size for a dataset and
    /// condition. Stage-1 encoders use their single-modality row; stage 2
    /// uses the fused row.
    pub fn preset(dataset: DatasetKind, condition: Condition) -> Self {
        let (learning_rate, weight_decay, batch_size, max_epochs) = match (dataset, condition) {
            (DatasetKind::UtdMhad, Condition::Imu) => (1e-4, 1e-6, 128, 50),
            (DatasetKind::UtdMhad, Condition::Video) => (1e-3, 1e-5, 16, 50),
            (DatasetKind::UtdMhad, Condition::Fused) => (5e-4, 5e-6, 16, 30),
            (DatasetKind::Mmact, Condition::Imu) => (5e-3, 5e-5, 256, 50),
            (DatasetKind::Mmact, Condition::Video) => (1e-3, 1e-5, 20, 50),
            (DatasetKind::Mmact, Condition::Fused) => (1e-4, 1e-6, 18, 30),
            (DatasetKind::Synthetic, Condition::Imu) => (3e-3, 1e-5, 16, 30),
            (DatasetKind::Synthetic, Condition::Video) => (3e-3, 1e-5, 16, 30),
            (DatasetKind::Synthetic, Condition::Fused) => (1e-3, 1e-5, 16, 20),
        };
        Self {
            learning_rate,
            weight_decay,
            batch_size,
            max_epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be ≥ 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be ≥ 1 (use null to disable)".into()));
        }
        Ok(())
    }
}

/// Independent seed for one purpose, derived from a base seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_hyperparameters() {
        let p = |d, c| {
            let h = TrainHyperparams::preset(d, c);
            (h.learning_rate, h.weight_decay, h.batch_size)
        };
        assert_eq!(p(DatasetKind::UtdMhad, Condition::Imu), (1e-4, 1e-6, 128));
        assert_eq!(p(DatasetKind::UtdMhad, Condition::Video), (1e-3, 1e-5, 16));
        assert_eq!(p(DatasetKind::UtdMhad, Condition::Fused), (5e-4, 5e-6, 16));
        assert_eq!(p(DatasetKind::Mmact, Condition::Imu), (5e-3, 5e-5, 256));
        assert_eq!(p(DatasetKind::Mmact, Condition::Video), (1e-3, 1e-5, 20));
        assert_eq!(p(DatasetKind::Mmact, Condition::Fused), (1e-4, 1e-6, 18));
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        for bad in [
            TrainHyperparams {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainHyperparams {
                weight_decay: -1.0,
                ..Default::default()
            },
            TrainHyperparams {
                batch_size: 0,
                ..Default::default()
            },
            TrainHyperparams {
                val_fraction: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_eq!(derive_seed(7, "split"), derive_seed(7, "split"));
        assert_ne!(derive_seed(7, "split"), derive_seed(7, "shuffle"));
        assert_ne!(derive_seed(7, "split"), derive_seed(8, "split"));
    }
}
