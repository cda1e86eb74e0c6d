use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use ndarray::{Array3, Array5, ArrayD, Axis, Ix2, Ix4};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{LabeledSample, Modality, Preprocessing, SensorSequence, VideoClip};
use crate::archive;
use crate::error::{Error, Result};
use crate::params::hex;

/// On-disk cache of preprocessed samples, keyed by
/// (dataset, sample_id, preprocessing hash).
#[derive(Debug, Clone)]
pub struct PreprocessCache {
    dir: PathBuf,
}

impl PreprocessCache {
    pub fn new(root: impl Into<PathBuf>, dataset: &str, prep: &Preprocessing) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(prep).expect("serialisable"));
        let hash = hex(&digest[..8]);
        Self {
            dir: root.into().join(dataset).join(hash),
        }
    }

    fn path(&self, sample_id: &str, m: Modality) -> PathBuf {
        let safe: String = sample_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.dir
            .join(format!("{safe}.{}.safetensors", m.as_str().to_lowercase()))
    }

    fn load(&self, sample_id: &str, m: Modality) -> Option<(ArrayD<f64>, f64)> {
        let path = self.path(sample_id, m);
        let archive = archive::read_archive(&path).ok()?;
        let rate = archive.header["rate"].as_f64()?;
        archive.arrays.get("values").cloned().map(|a| (a, rate))
    }

    fn store(&self, sample_id: &str, m: Modality, values: ArrayD<f64>, rate: f64) -> Result<()> {
        let mut arrays = IndexMap::new();
        arrays.insert("values".to_string(), values);
        archive::write_archive(
            &self.path(sample_id, m),
            &arrays,
            &json!({ "sample_id": sample_id, "rate": rate }),
        )
    }
}

#[derive(Debug, Default)]
struct Memo {
    budget: usize,
    used: usize,
    sensors: HashMap<String, SensorSequence>,
    videos: HashMap<String, VideoClip>,
}

/// Turns sample payloads into preprocessed, model-ready batches.
///
/// Clones share the in-memory memo, so train and test passes over one
/// builder preprocess each sample once.
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    prep: Preprocessing,
    cache: Option<PreprocessCache>,
    memo: Option<Arc<Mutex<Memo>>>,
}

impl BatchBuilder {
    pub fn new(prep: Preprocessing) -> Self {
        Self {
            prep,
            cache: None,
            memo: None,
        }
    }

    /// Keeps preprocessed samples in memory up to `budget_bytes`.
    pub fn with_memory(mut self, budget_bytes: usize) -> Self {
        self.memo = Some(Arc::new(Mutex::new(Memo {
            budget: budget_bytes,
            ..Default::default()
        })));
        self
    }

    fn remember<T: Clone>(
        &self,
        value: &T,
        bytes: usize,
        slot: impl FnOnce(&mut Memo) -> &mut HashMap<String, T>,
        id: &str,
    ) {
        if let Some(memo) = &self.memo {
            let mut memo = memo.lock().expect("memo lock");
            if memo.used + bytes <= memo.budget {
                memo.used += bytes;
                slot(&mut memo).insert(id.to_string(), value.clone());
            }
        }
    }

    pub fn with_cache(mut self, cache: PreprocessCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.prep
    }

    pub fn sensor(&self, sample: &LabeledSample) -> Result<SensorSequence> {
        let payload = sample.sensor.as_ref().ok_or_else(|| Error::SampleLoad {
            sample: sample.sample_id.clone(),
            reason: "no IMU stream".into(),
        })?;
        if let Some(memo) = &self.memo {
            if let Some(hit) = memo.lock().expect("memo lock").sensors.get(&sample.sample_id) {
                return Ok(hit.clone());
            }
        }
        let out = match self
            .cache
            .as_ref()
            .and_then(|c| c.load(&sample.sample_id, Modality::Imu))
        {
            Some((v, rate)) if v.ndim() == 2 => {
                SensorSequence::unnamed(v.into_dimensionality::<Ix2>().expect("2-d"), rate)?
            }
            _ => {
                let seq = payload.get().map_err(|e| wrap(sample, e))?;
                let out = self.prep.sensor(&seq).map_err(|e| wrap(sample, e))?;
                if let Some(cache) = &self.cache {
                    cache.store(
                        &sample.sample_id,
                        Modality::Imu,
                        out.values().clone().into_dyn(),
                        out.sample_rate_hz(),
                    )?;
                }
                out
            }
        };
        self.remember(&out, out.values().len() * 8, |m| &mut m.sensors, &sample.sample_id);
        Ok(out)
    }

    pub fn video(&self, sample: &LabeledSample) -> Result<VideoClip> {
        let payload = sample.video.as_ref().ok_or_else(|| Error::SampleLoad {
            sample: sample.sample_id.clone(),
            reason: "no video stream".into(),
        })?;
        if let Some(memo) = &self.memo {
            if let Some(hit) = memo.lock().expect("memo lock").videos.get(&sample.sample_id) {
                return Ok(hit.clone());
            }
        }
        let out = match self
            .cache
            .as_ref()
            .and_then(|c| c.load(&sample.sample_id, Modality::Video))
        {
            Some((v, rate)) if v.ndim() == 4 => VideoClip::new(v.into_dimensionality::<Ix4>().expect("4-d"), rate)?,
            _ => {
                let clip = payload.get().map_err(|e| wrap(sample, e))?;
                let out = self.prep.video(&clip).map_err(|e| wrap(sample, e))?;
                if let Some(cache) = &self.cache {
                    cache.store(
                        &sample.sample_id,
                        Modality::Video,
                        out.frames().clone().into_dyn(),
                        out.frame_rate_hz(),
                    )?;
                }
                out
            }
        };
        self.remember(&out, out.frames().len() * 8, |m| &mut m.videos, &sample.sample_id);
        Ok(out)
    }

    /// `[batch, channels, length]`
    pub fn sensor_batch(&self, samples: &[&LabeledSample]) -> Result<Array3<f64>> {
        let seqs = samples.iter().map(|s| self.sensor(s)).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = seqs.iter().position(|s| s.channels() != seqs[0].channels()) {
            return Err(Error::SampleLoad {
                sample: samples[bad].sample_id.clone(),
                reason: format!("{} channels, batch has {}", seqs[bad].channels(), seqs[0].channels()),
            });
        }
        let views: Vec<_> = seqs.iter().map(|s| s.values().view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    /// `[batch, time, height, width, 3]`
    pub fn video_batch(&self, samples: &[&LabeledSample]) -> Result<Array5<f64>> {
        let clips = samples.iter().map(|s| self.video(s)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = clips.iter().map(|c| c.frames().view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn batch(&self, m: Modality, samples: &[&LabeledSample]) -> Result<ArrayD<f64>> {
        Ok(match m {
            Modality::Imu => self.sensor_batch(samples)?.into_dyn(),
            Modality::Video => self.video_batch(samples)?.into_dyn(),
        })
    }
}

fn wrap(sample: &LabeledSample, e: Error) -> Error {
    match e {
        e @ Error::SampleLoad { .. } => e,
        other => Error::SampleLoad {
            sample: sample.sample_id.clone(),
            reason: other.to_string(),
        },
    }
}
