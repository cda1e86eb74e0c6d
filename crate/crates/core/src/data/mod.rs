//! Samples, dataset indexes, loaders, preprocessing and the dataset
//! transformations used by the ratio and zero-shot experiments.

mod batch;
pub mod decode;
pub mod mmact;
mod preprocess;
pub mod source;
pub mod synthetic;
mod transform;
pub mod utd_mhad;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

pub use batch::{BatchBuilder, PreprocessCache};
pub use preprocess::{pad_or_crop, resample_sensor, resize_frames, sample_video_frames, stack_channels, Preprocessing};
pub use source::{DatasetRegistry, DatasetSource, LoadOptions, SourceRequest};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use transform::{mask_classes, subset_by_ratio, MaskAudit};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "IMU")]
    Imu,
    #[serde(rename = "VIDEO")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Imu, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Imu => "IMU",
            Modality::Video => "VIDEO",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IMU" => Ok(Modality::Imu),
            "VIDEO" | "RGB" => Ok(Modality::Video),
            _ => Err(Error::Invalid(format!("modality `{s}` is not one of IMU, VIDEO"))),
        }
    }
}

/// Which modalities a sample may supply during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub imu: bool,
    pub video: bool,
}

impl ModalityMask {
    pub const BOTH: ModalityMask = ModalityMask { imu: true, video: true };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Imu => self.imu,
            Modality::Video => self.video,
        }
    }

    pub fn remove(&mut self, m: Modality) {
        match m {
            Modality::Imu => self.imu = false,
            Modality::Video => self.video = false,
        }
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::BOTH
    }
}

/// Multivariate IMU series, `[channels × timesteps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSequence {
    values: Array2<f64>,
    sample_rate_hz: f64,
    channel_names: Vec<String>,
}

impl SensorSequence {
    pub fn new(values: Array2<f64>, sample_rate_hz: f64, channel_names: Vec<String>) -> Result<Self> {
        let (c, t) = values.dim();
        if c == 0 || t == 0 {
            return Err(Error::Shape(format!(
                "sensor sequence must be non-empty, found {c}×{t}"
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Invalid(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if channel_names.len() != c {
            return Err(Error::Shape(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        Ok(Self {
            values,
            sample_rate_hz,
            channel_names,
        })
    }

    /// Channels named `ch0..chN`.
    pub fn unnamed(values: Array2<f64>, sample_rate_hz: f64) -> Result<Self> {
        let names = (0..values.nrows()).map(|i| format!("ch{i}")).collect();
        Self::new(values, sample_rate_hz, names)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// RGB frames `[time × height × width × 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    frame_rate_hz: f64,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, frame_rate_hz: f64) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 || h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "video clip must be [t≥1, h, w, 3], found {:?}",
                frames.shape()
            )));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::Invalid(format!("frame rate {frame_rate_hz} must be positive")));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn frame_size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

/// Lazily decoded modality payload.
pub trait Reader<T>: Send + Sync + fmt::Debug {
    fn read(&self) -> Result<T>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone)]
pub enum Payload<T> {
    Loaded(Arc<T>),
    Deferred(Arc<dyn Reader<T>>),
}

impl<T> Payload<T> {
    pub fn loaded(value: T) -> Self {
        Payload::Loaded(Arc::new(value))
    }

    pub fn get(&self) -> Result<Arc<T>> {
        match self {
            Payload::Loaded(v) => Ok(Arc::clone(v)),
            Payload::Deferred(r) => r.read().map(Arc::new),
        }
    }

    pub fn is_loaded(&self) -> bool {
        matches!(self, Payload::Loaded(_))
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub sample_id: String,
    pub subject_id: u32,
    pub class_id: usize,
    pub sensor: Option<Payload<SensorSequence>>,
    pub video: Option<Payload<VideoClip>>,
    pub modality_mask: ModalityMask,
}

impl LabeledSample {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Imu => self.sensor.is_some(),
            Modality::Video => self.video.is_some(),
        }
    }

    /// Present and allowed by the modality mask.
    pub fn eligible(&self, m: Modality) -> bool {
        self.has(m) && self.modality_mask.contains(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    samples: Vec<LabeledSample>,
    num_classes: usize,
    class_names: Vec<String>,
    split_tag: SplitTag,
}

impl DatasetIndex {
    pub fn new(samples: Vec<LabeledSample>, class_names: Vec<String>, split_tag: SplitTag) -> Result<Self> {
        let num_classes = class_names.len();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.class_id >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.class_id,
                    num_classes,
                });
            }
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id `{}`", s.sample_id)));
            }
            if s.sensor.is_none() && s.video.is_none() {
                return Err(Error::Invalid(format!("sample `{}` carries no modality", s.sample_id)));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            class_names,
            split_tag,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn sample_ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.sample_id.as_str()).collect()
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.class_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn eligible(&self, m: Modality) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.eligible(m))
    }

    /// Keeps the samples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            split_tag: self.split_tag,
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<LabeledSample>) -> Self {
        Self {
            samples,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            split_tag: self.split_tag,
        }
    }
}

/// A sample the loader could not index, kept for the load manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

/// Train and test splits plus the preprocessing that canonicalises them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub preprocessing: Preprocessing,
    pub skipped: Vec<SkippedSample>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn modality_parsing() {
        assert_eq!("imu".parse::<Modality>().unwrap(), Modality::Imu);
        assert_eq!("RGB".parse::<Modality>().unwrap(), Modality::Video);
        let err = "DEPTH".parse::<Modality>().unwrap_err();
        assert!(err.to_string().contains("DEPTH"));
    }

    #[test]
    fn video_clip_rejects_out_of_range_pixels() {
        let frames = Array::from_elem((2, 2, 2, 3), 1.5);
        assert!(VideoClip::new(frames, 15.0).is_err());
    }

    #[test]
    fn index_rejects_bad_class_and_duplicates() {
        let seq = SensorSequence::unnamed(Array2::zeros((1, 4)), 50.0).unwrap();
        let mk = |id: &str, class_id| LabeledSample {
            sample_id: id.into(),
            subject_id: 1,
            class_id,
            sensor: Some(Payload::loaded(seq.clone())),
            video: None,
            modality_mask: ModalityMask::BOTH,
        };
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(DatasetIndex::new(vec![mk("x", 2)], names.clone(), SplitTag::Train).is_err());
        assert!(DatasetIndex::new(vec![mk("x", 0), mk("x", 1)], names.clone(), SplitTag::Train).is_err());
        let idx = DatasetIndex::new(vec![mk("x", 0), mk("y", 1)], names, SplitTag::Train).unwrap();
        assert_eq!(idx.class_counts().into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 1)]);
    }
}
