//! Modality encoders behind one contract, registered by name.

mod imu;
mod video;

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, Ix2};
use serde_json::{json, Value};

pub use imu::{ImuEncoder, ImuEncoderConfig};
pub use video::{load_pretrained_video_weights, set_trainable_layers, Backbone, Mini3d, S3d, VideoEncoderConfig};

use crate::archive;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{self, GlobalAvgPool, Layer, Mode, ParamSpec, Sequential, Tape};
use crate::params::{Gradients, ModelParams};

pub trait Encoder: Send + Sync + fmt::Debug {
    /// Registry name, e.g. `imu_cnn1d`.
    fn kind(&self) -> &'static str;
    fn modality(&self) -> Modality;
    fn feature_dim(&self) -> usize;
    /// Parameter groups in forward order.
    fn group_names(&self) -> Vec<String>;
    fn param_specs(&self) -> Vec<ParamSpec>;
    /// Groups that stay trainable during joint fine-tuning.
    fn finetune_groups(&self) -> Vec<String>;
    fn config(&self) -> Value;

    /// Fan-in uniform initialisation, deterministic per seed, all groups
    /// trainable.
    fn init(&self, seed: u64) -> Result<ModelParams> {
        Ok(nn::init_params(&self.param_specs(), seed))
    }

    /// Maps a model-ready batch (`[B, C, L]` sensors or `[B, T, H, W, 3]`
    /// clips) to `[B, feature_dim]`.
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(Array2<f64>, Tape)>;

    /// Accumulates gradients of trainable groups given `d loss / d features`.
    fn backward(&self, params: &ModelParams, tape: Tape, dfeat: Array2<f64>, grads: &mut Gradients) -> Result<()>;
}

/// A convolutional trunk followed by global average pooling.
#[derive(Debug)]
pub(crate) struct PooledNet {
    pub trunk: Sequential,
}

impl PooledNet {
    pub fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(Array2<f64>, Tape)> {
        let (h, t1) = self.trunk.forward(params, x, mode)?;
        let (y, t2) = GlobalAvgPool.forward(params, h, mode)?;
        let y = y
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok((
            y,
            Tape {
                children: vec![t1, t2],
                ..Default::default()
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ModelParams,
        mut tape: Tape,
        dfeat: Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<()> {
        if !self.trunk.has_trainable(params) {
            return Ok(());
        }
        let t2 = tape.children.pop().expect("pool tape");
        let t1 = tape.children.pop().expect("trunk tape");
        let dh = GlobalAvgPool
            .backward(params, t2, dfeat.into_dyn(), grads, true)?
            .expect("requested");
        self.trunk.backward(params, t1, dh, grads, false)?;
        Ok(())
    }
}

type Builder = fn(&Value) -> Result<Box<dyn Encoder>>;

/// Encoder constructors keyed by name. Each takes its JSON config.
pub struct EncoderRegistry {
    builders: IndexMap<&'static str, Builder>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: IndexMap::new(),
        };
        r.register("imu_cnn1d", |v| Ok(Box::new(ImuEncoder::new(parse(v)?)?)));
        r.register("mini3d", |v| {
            let mut cfg: VideoEncoderConfig = parse(v)?;
            cfg.backbone = Backbone::Mini3d;
            Ok(Box::new(Mini3d::new(cfg)?))
        });
        r.register("s3d", |v| {
            let mut cfg: VideoEncoderConfig = parse(v)?;
            cfg.backbone = Backbone::S3d;
            Ok(Box::new(S3d::new(cfg)?))
        });
        r
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(v: &Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("encoder config: {e}")))
}

impl EncoderRegistry {
    pub fn register(&mut self, name: &'static str, builder: Builder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, name: &str, config: &Value) -> Result<Box<dyn Encoder>> {
        let key = name.to_ascii_lowercase();
        let builder = self.builders.get(key.as_str()).ok_or_else(|| Error::UnknownStrategy {
            kind: "encoder",
            name: name.to_string(),
            registered: self.names().iter().map(|s| s.to_string()).collect(),
        })?;
        builder(config)
    }
}

/// Writes encoder parameters with a header recording kind, config and seed.
pub fn save_encoder(path: &Path, encoder: &dyn Encoder, params: &ModelParams, seed: u64) -> Result<()> {
    archive::save_params(
        path,
        params,
        json!({ "kind": encoder.kind(), "config": encoder.config(), "seed": seed }),
    )
}

/// Rebuilds an encoder and its parameters from [`save_encoder`] output.
pub fn load_encoder(path: &Path, registry: &EncoderRegistry) -> Result<(Box<dyn Encoder>, ModelParams, u64)> {
    let (params, header) = archive::load_params(path)?;
    let kind = header["kind"]
        .as_str()
        .ok_or_else(|| Error::Archive(format!("{}: header has no encoder kind", path.display())))?;
    let encoder = registry.build(kind, &header["config"])?;
    nn::check_params(&encoder.param_specs(), &params)?;
    Ok((encoder, params, header["seed"].as_u64().unwrap_or(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_names_in_errors() {
        let r = EncoderRegistry::default();
        let err = r.build("resnet18", &Value::Null).unwrap_err().to_string();
        assert!(err.contains("imu_cnn1d") && err.contains("s3d"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = EncoderRegistry::default();
        let enc = r
            .build("imu_cnn1d", &json!({"in_channels": 2, "block_channels": [3, 3, 3]}))
            .unwrap();
        let params = enc.init(11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.safetensors");
        save_encoder(&path, enc.as_ref(), &params, 11).unwrap();
        let (enc2, params2, seed) = load_encoder(&path, &r).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(enc2.config(), enc.config());
        assert_eq!(params2.digests(), params.digests());
    }
}
