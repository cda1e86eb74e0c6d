//! Desk-scale multimodal benchmark with analytically known accuracy bounds.
//!
//! Class `(a, b)` (id `a·B + b`) carries factor `a` only in the sensor stream
//! (a sinusoid of `2(a+1)` cycles per window) and factor `b` only in the video
//! stream (a square translating in direction `2πb/B`). Each modality alone can
//! therefore identify at most one factor.

use std::f64::consts::PI;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, Array4, Array5, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    Dataset, DatasetIndex, LabeledSample, ModalityMask, Payload, Preprocessing, SensorSequence, SplitTag, VideoClip,
};
use crate::archive;
use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.2;
const FOREGROUND: f64 = 0.8;
const TEST_STREAM: u64 = 0x7e57_5eed_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_imu_factors: usize,
    pub num_video_factors: usize,
    pub samples_per_class: usize,
    /// Defaults to `samples_per_class`.
    pub test_samples_per_class: Option<usize>,
    pub noise_std: f64,
    pub seq_len: usize,
    pub imu_channels: usize,
    /// (time, height, width)
    pub clip_shape: (usize, usize, usize),
    pub sensor_rate_hz: f64,
    pub frame_rate_hz: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_imu_factors: 4,
            num_video_factors: 4,
            samples_per_class: 16,
            test_samples_per_class: Some(16),
            noise_std: 0.5,
            seq_len: 64,
            imu_channels: 3,
            clip_shape: (8, 16, 16),
            sensor_rate_hz: 50.0,
            frame_rate_hz: 15.0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_imu_factors * self.num_video_factors
    }

    pub fn factors(&self, class_id: usize) -> (usize, usize) {
        (class_id / self.num_video_factors, class_id % self.num_video_factors)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.clip_shape;
        if self.num_imu_factors == 0 || self.num_video_factors == 0 {
            return Err(Error::Config("factor counts must be ≥ 1".into()));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == Some(0) {
            return Err(Error::Config("samples per class must be ≥ 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std {} must be a finite non-negative number",
                self.noise_std
            )));
        }
        if self.seq_len == 0 || self.imu_channels == 0 || t == 0 || h < 2 || w < 2 {
            return Err(Error::Config("sequence and clip dimensions must be non-empty".into()));
        }
        if 4 * self.num_imu_factors >= self.seq_len {
            return Err(Error::Config(format!(
                "seq_len {} too short to hold {} distinct sinusoid templates",
                self.seq_len, self.num_imu_factors
            )));
        }
        Ok(())
    }

    pub fn preprocessing(&self) -> Preprocessing {
        let (t, h, w) = self.clip_shape;
        Preprocessing {
            sensor_rate_hz: self.sensor_rate_hz,
            sensor_len: self.seq_len,
            video_fps: self.frame_rate_hz,
            video_frames: t,
            video_size: (h, w),
        }
    }

    /// Noise-free sensor waveform of IMU factor `a`, `[channels × seq_len]`.
    pub fn sensor_template(&self, a: usize) -> Array2<f64> {
        let cycles = 2.0 * (a + 1) as f64;
        let len = self.seq_len as f64;
        let chans = self.imu_channels as f64;
        Array2::from_shape_fn((self.imu_channels, self.seq_len), |(c, t)| {
            (2.0 * PI * cycles * t as f64 / len + PI * c as f64 / (2.0 * chans)).sin()
        })
    }

    /// Noise-free clip of video factor `b`, `[time × height × width × 3]`.
    pub fn video_template(&self, b: usize) -> Array4<f64> {
        let (t, h, w) = self.clip_shape;
        let side = (h.min(w) / 4).max(2);
        let angle = 2.0 * PI * b as f64 / self.num_video_factors as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        let (y0, x0) = ((h - side) / 2, (w - side) / 2);
        let mut frames = Array4::from_elem((t, h, w, 3), BACKGROUND);
        for f in 0..t {
            let oy = (y0 as f64 + dy * f as f64).round() as isize;
            let ox = (x0 as f64 + dx * f as f64).round() as isize;
            for i in 0..side as isize {
                for j in 0..side as isize {
                    let y = (oy + i).rem_euclid(h as isize) as usize;
                    let x = (ox + j).rem_euclid(w as isize) as usize;
                    frames.slice_mut(s![f, y, x, ..]).fill(FOREGROUND);
                }
            }
        }
        frames
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| {
                let (a, b) = self.factors(c);
                format!("imu{a}_video{b}")
            })
            .collect()
    }
}

/// Generates disjoint train and test splits. The test split draws from a
/// stream derived from `seed`, so it never repeats a training draw.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let sensors: Vec<_> = (0..spec.num_imu_factors).map(|a| spec.sensor_template(a)).collect();
    let videos: Vec<_> = (0..spec.num_video_factors).map(|b| spec.video_template(b)).collect();
    let make = |split: SplitTag, per_class: usize, stream: u64| -> Result<DatasetIndex> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut draw = |shape_len: usize| -> Vec<f64> {
            if spec.noise_std == 0.0 {
                vec![0.0; shape_len]
            } else {
                (0..shape_len).map(|_| noise.sample(&mut rng)).collect()
            }
        };
        let tag = match split {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        };
        let mut samples = Vec::with_capacity(per_class * spec.num_classes());
        for i in 0..per_class {
            for class_id in 0..spec.num_classes() {
                let (a, b) = spec.factors(class_id);
                let mut sensor = sensors[a].clone();
                let n = sensor.len();
                sensor.iter_mut().zip(draw(n)).for_each(|(v, n)| *v += n);
                let mut video = videos[b].clone();
                let n = video.len();
                video
                    .iter_mut()
                    .zip(draw(n))
                    .for_each(|(v, n)| *v = (*v + n).clamp(0.0, 1.0));
                samples.push(LabeledSample {
                    sample_id: format!("syn-{tag}-c{class_id:03}-{i:04}"),
                    subject_id: if split == SplitTag::Train { 1 } else { 2 },
                    class_id,
                    sensor: Some(Payload::loaded(SensorSequence::unnamed(sensor, spec.sensor_rate_hz)?)),
                    video: Some(Payload::loaded(VideoClip::new(video, spec.frame_rate_hz)?)),
                    modality_mask: ModalityMask::BOTH,
                });
            }
        }
        DatasetIndex::new(samples, spec.class_names(), split)
    };
    Ok(Dataset {
        name: "SYNTHETIC".into(),
        train: make(SplitTag::Train, spec.samples_per_class, 0)?,
        test: make(
            SplitTag::Test,
            spec.test_samples_per_class.unwrap_or(spec.samples_per_class),
            TEST_STREAM,
        )?,
        preprocessing: spec.preprocessing(),
        skipped: Vec::new(),
    })
}

/// Writes both splits to one archive with a JSON header holding the
/// `SyntheticSpec` and seed.
pub fn save_synthetic(path: &Path, spec: &SyntheticSpec, seed: u64, dataset: &Dataset) -> Result<()> {
    let mut arrays = IndexMap::new();
    let mut ids = serde_json::Map::new();
    for (tag, index) in [("train", &dataset.train), ("test", &dataset.test)] {
        let samples = index.samples();
        let sensors = samples
            .iter()
            .map(|s| s.sensor.as_ref().expect("synthetic sample").get())
            .collect::<Result<Vec<_>>>()?;
        let videos = samples
            .iter()
            .map(|s| s.video.as_ref().expect("synthetic sample").get())
            .collect::<Result<Vec<_>>>()?;
        let sv: Vec<_> = sensors.iter().map(|s| s.values().view().insert_axis(Axis(0))).collect();
        let vv: Vec<_> = videos.iter().map(|v| v.frames().view().insert_axis(Axis(0))).collect();
        let stack = |views: &[ndarray::ArrayViewD<f64>]| -> ArrayD<f64> {
            ndarray::concatenate(Axis(0), views).expect("uniform shapes")
        };
        arrays.insert(
            format!("{tag}.sensor"),
            stack(&sv.iter().map(|v| v.view().into_dyn()).collect::<Vec<_>>()),
        );
        arrays.insert(
            format!("{tag}.video"),
            stack(&vv.iter().map(|v| v.view().into_dyn()).collect::<Vec<_>>()),
        );
        arrays.insert(
            format!("{tag}.labels"),
            Array1::from_iter(samples.iter().map(|s| s.class_id as f64)).into_dyn(),
        );
        ids.insert(tag.into(), json!(index.sample_ids()));
    }
    let header = json!({
        "format": "fusehar-synthetic/1",
        "spec": spec,
        "seed": seed,
        "sample_ids": ids,
    });
    archive::write_archive(path, &arrays, &header)
}

pub fn load_synthetic(path: &Path) -> Result<(SyntheticSpec, u64, Dataset)> {
    let archive = archive::read_archive(path)?;
    let spec: SyntheticSpec = serde_json::from_value(archive.header["spec"].clone())?;
    let seed = archive.header["seed"]
        .as_u64()
        .ok_or_else(|| Error::Archive("synthetic archive has no seed".into()))?;
    let split = |tag: &str, split: SplitTag| -> Result<DatasetIndex> {
        let get = |k: &str| {
            archive
                .arrays
                .get(&format!("{tag}.{k}"))
                .cloned()
                .ok_or_else(|| Error::MissingTensor(format!("{tag}.{k}")))
        };
        let sensor: Array3<f64> = get("sensor")?
            .into_dimensionality()
            .map_err(|e| Error::Archive(e.to_string()))?;
        let video: Array5<f64> = get("video")?
            .into_dimensionality()
            .map_err(|e| Error::Archive(e.to_string()))?;
        let labels = get("labels")?;
        let ids = archive.header["sample_ids"][tag]
            .as_array()
            .ok_or_else(|| Error::Archive(format!("missing {tag} sample ids")))?;
        let samples = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                Ok(LabeledSample {
                    sample_id: id.as_str().unwrap_or_default().to_string(),
                    subject_id: if split == SplitTag::Train { 1 } else { 2 },
                    class_id: labels[[i]] as usize,
                    sensor: Some(Payload::loaded(SensorSequence::unnamed(
                        sensor.index_axis(Axis(0), i).to_owned(),
                        spec.sensor_rate_hz,
                    )?)),
                    video: Some(Payload::loaded(VideoClip::new(
                        video.index_axis(Axis(0), i).to_owned(),
                        spec.frame_rate_hz,
                    )?)),
                    modality_mask: ModalityMask::BOTH,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetIndex::new(samples, spec.class_names(), split)
    };
    let dataset = Dataset {
        name: "SYNTHETIC".into(),
        train: split("train", SplitTag::Train)?,
        test: split("test", SplitTag::Test)?,
        preprocessing: spec.preprocessing(),
        skipped: Vec::new(),
    };
    Ok((spec, seed, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 2,
            test_samples_per_class: Some(1),
            clip_shape: (4, 8, 8),
            seq_len: 32,
            ..Default::default()
        }
    }

    #[test]
    fn class_layout() {
        let spec = small();
        assert_eq!(spec.num_classes(), 16);
        assert_eq!(spec.factors(6), (1, 2));
        let ds = generate_synthetic_dataset(&spec, 3).unwrap();
        assert_eq!(ds.train.len(), 32);
        assert_eq!(ds.test.len(), 16);
        assert_eq!(ds.train.num_classes(), 16);
    }

    #[test]
    fn sensor_templates_are_orthogonal() {
        let spec = small();
        let t0 = spec.sensor_template(0);
        let t1 = spec.sensor_template(1);
        let dot: f64 = t0.iter().zip(t1.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9, "{dot}");
    }

    #[test]
    fn splits_are_disjoint_draws() {
        let ds = generate_synthetic_dataset(&small(), 3).unwrap();
        let a = ds.train.samples()[0].sensor.as_ref().unwrap().get().unwrap();
        let b = ds.test.samples()[0].sensor.as_ref().unwrap().get().unwrap();
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn archive_round_trip() {
        let spec = small();
        let ds = generate_synthetic_dataset(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.safetensors");
        save_synthetic(&path, &spec, 11, &ds).unwrap();
        let (spec2, seed, back) = load_synthetic(&path).unwrap();
        assert_eq!((spec2, seed), (spec, 11));
        assert_eq!(back.train.sample_ids(), ds.train.sample_ids());
        let v1 = ds.test.samples()[3].video.as_ref().unwrap().get().unwrap();
        let v2 = back.test.samples()[3].video.as_ref().unwrap().get().unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SyntheticSpec {
            noise_std: -1.0,
            ..small()
        };
        assert!(matches!(generate_synthetic_dataset(&spec, 0), Err(Error::Config(_))));
    }
}
