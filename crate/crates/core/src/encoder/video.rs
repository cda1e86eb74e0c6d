use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Encoder, PooledNet};
use crate::archive;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{self, Concat, Conv3d, FrozenBatchNorm, Layer, MaxPool3d, Mode, ParamSpec, Relu, Sequential, Tape};
use crate::params::{Gradients, ModelParams, TrainabilityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "S3D", alias = "s3d")]
    S3d,
    #[default]
    #[serde(rename = "MINI3D", alias = "mini3d")]
    Mini3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoEncoderConfig {
    pub backbone: Backbone,
    /// (time, height, width) of every input clip.
    pub input_shape: (usize, usize, usize),
    /// Groups left trainable during joint fine-tuning; `None` uses the
    /// backbone's default pair.
    pub trainable_groups: Option<Vec<String>>,
    /// Mini3d only.
    pub block_channels: [usize; 3],
    /// Pre-trained weights to start from.
    pub checkpoint: Option<PathBuf>,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Mini3d,
            input_shape: (16, 32, 32),
            trainable_groups: None,
            block_channels: [8, 16, 32],
            checkpoint: None,
        }
    }
}

impl VideoEncoderConfig {
    pub fn s3d() -> Self {
        Self {
            backbone: Backbone::S3d,
            input_shape: (32, 224, 224),
            ..Default::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            Backbone::S3d => S3D_FEATURE_DIM,
            Backbone::Mini3d => self.block_channels[2],
        }
    }

    pub fn build(&self) -> Result<Box<dyn Encoder>> {
        Ok(match self.backbone {
            Backbone::S3d => Box::new(S3d::new(self.clone())?),
            Backbone::Mini3d => Box::new(Mini3d::new(self.clone())?),
        })
    }
}

/// `[B, T, H, W, 3]` → `[B, 3, T, H, W]`, checked against the configured shape.
fn to_channels_first(x: ArrayD<f64>, shape: (usize, usize, usize), name: &str) -> Result<ArrayD<f64>> {
    let (t, h, w) = shape;
    if x.ndim() != 5 || x.shape()[1..] != [t, h, w, 3] {
        return Err(Error::Shape(format!(
            "{name} expects clips [batch, {t}, {h}, {w}, 3], found {:?}",
            x.shape()
        )));
    }
    Ok(x.permuted_axes(vec![0, 4, 1, 2, 3]).as_standard_layout().into_owned())
}

fn check_trainable(groups: &[String], valid: &[String]) -> Result<()> {
    for g in groups {
        if !valid.contains(g) {
            return Err(Error::UnknownGroup {
                name: g.clone(),
                valid: valid.to_vec(),
            });
        }
    }
    Ok(())
}

const MINI3D_GROUPS: [&str; 3] = ["Block_1", "Block_2", "Block_3"];

/// Three 3×3×3 convolution blocks, spatial stride 2, each followed by ReLU.
#[derive(Debug)]
pub struct Mini3d {
    config: VideoEncoderConfig,
    net: PooledNet,
}

impl Mini3d {
    pub fn new(config: VideoEncoderConfig) -> Result<Self> {
        let (t, h, w) = config.input_shape;
        if t == 0 || h == 0 || w == 0 || config.block_channels.contains(&0) {
            return Err(Error::Config("MINI3D input shape and channels must be ≥ 1".into()));
        }
        let mut trunk = Sequential::new();
        let mut cin = 3;
        for (i, group) in MINI3D_GROUPS.iter().enumerate() {
            let cout = config.block_channels[i];
            trunk
                .push(
                    Conv3d::new(group, "conv", cin, cout, [3, 3, 3])
                        .stride([1, 2, 2])
                        .padding([1, 1, 1]),
                )
                .push(Relu);
            cin = cout;
        }
        let enc = Self {
            config,
            net: PooledNet { trunk },
        };
        if let Some(g) = &enc.config.trainable_groups {
            check_trainable(g, &enc.group_names())?;
        }
        Ok(enc)
    }
}

impl Encoder for Mini3d {
    fn kind(&self) -> &'static str {
        "mini3d"
    }

    fn modality(&self) -> Modality {
        Modality::Video
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn group_names(&self) -> Vec<String> {
        MINI3D_GROUPS.iter().map(|s| s.to_string()).collect()
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.net.trunk.param_specs()
    }

    fn finetune_groups(&self) -> Vec<String> {
        self.config
            .trainable_groups
            .clone()
            .unwrap_or_else(|| vec!["Block_2".into(), "Block_3".into()])
    }

    fn config(&self) -> Value {
        serde_json::to_value(&self.config).expect("serialisable")
    }

    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(Array2<f64>, Tape)> {
        let x = to_channels_first(x, self.config.input_shape, "MINI3D")?;
        self.net.forward(params, x, mode)
    }

    fn backward(&self, params: &ModelParams, tape: Tape, dfeat: Array2<f64>, grads: &mut Gradients) -> Result<()> {
        self.net.backward(params, tape, dfeat, grads)
    }
}

pub const S3D_FEATURE_DIM: usize = 1024;
const BN_EPS: f64 = 1e-3;
const KINETICS_MEAN: [f64; 3] = [0.43216, 0.394666, 0.37645];
const KINETICS_STD: [f64; 3] = [0.22803, 0.22145, 0.216989];

/// Parameter groups of S3D with their position in torchvision's `features`.
const S3D_GROUPS: [(&str, usize); 12] = [
    ("Conv_1a", 0),
    ("Conv_2b", 2),
    ("Conv_2c", 3),
    ("Mixed_3b", 5),
    ("Mixed_3c", 6),
    ("Mixed_4b", 8),
    ("Mixed_4c", 9),
    ("Mixed_4d", 10),
    ("Mixed_4e", 11),
    ("Mixed_4f", 12),
    ("Mixed_5b", 14),
    ("Mixed_5c", 15),
];

fn conv_bn_relu(
    group: &str,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Sequential {
    Sequential::new()
        .with(
            Conv3d::new(group, &nn::join(prefix, "0"), cin, cout, kernel)
                .stride(stride)
                .padding(padding)
                .without_bias(),
        )
        .with(FrozenBatchNorm::new(group, &nn::join(prefix, "1"), cout, BN_EPS))
        .with(Relu)
}

fn pointwise(group: &str, prefix: &str, cin: usize, cout: usize) -> Sequential {
    conv_bn_relu(group, prefix, cin, cout, [1, 1, 1], [1, 1, 1], [0, 0, 0])
}

/// A k×k spatial convolution followed by a k×1×1 temporal one.
fn separable(group: &str, prefix: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Sequential {
    Sequential::new()
        .with(conv_bn_relu(
            group,
            &nn::join(prefix, "0"),
            cin,
            cout,
            [1, k, k],
            [1, s, s],
            [0, p, p],
        ))
        .with(conv_bn_relu(
            group,
            &nn::join(prefix, "1"),
            cout,
            cout,
            [k, 1, 1],
            [s, 1, 1],
            [p, 0, 0],
        ))
}

#[allow(clippy::too_many_arguments)]
fn inception(group: &str, cin: usize, b0: usize, b1m: usize, b1: usize, b2m: usize, b2: usize, b3: usize) -> Concat {
    Concat::new()
        .with(pointwise(group, "branch0", cin, b0))
        .with(
            Sequential::new()
                .with(pointwise(group, "branch1.0", cin, b1m))
                .with(separable(group, "branch1.1", b1m, b1, 3, 1, 1)),
        )
        .with(
            Sequential::new()
                .with(pointwise(group, "branch2.0", cin, b2m))
                .with(separable(group, "branch2.1", b2m, b2, 3, 1, 1)),
        )
        .with(
            Sequential::new()
                .with(MaxPool3d::new([3, 3, 3], [1, 1, 1], [1, 1, 1]))
                .with(pointwise(group, "branch3.1", cin, b3)),
        )
}

/// S3D with torchvision's layer layout. Batch norm uses stored statistics
/// throughout.
#[derive(Debug)]
pub struct S3d {
    config: VideoEncoderConfig,
    net: PooledNet,
}

impl S3d {
    pub fn new(config: VideoEncoderConfig) -> Result<Self> {
        let g = |i: usize| S3D_GROUPS[i].0;
        let pool_hw = || MaxPool3d::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        let trunk = Sequential::new()
            .with(separable(g(0), "", 3, 64, 7, 2, 3))
            .with(pool_hw())
            .with(pointwise(g(1), "", 64, 64))
            .with(separable(g(2), "", 64, 192, 3, 1, 1))
            .with(pool_hw())
            .with(inception(g(3), 192, 64, 96, 128, 16, 32, 32))
            .with(inception(g(4), 256, 128, 128, 192, 32, 96, 64))
            .with(MaxPool3d::new([3, 3, 3], [2, 2, 2], [1, 1, 1]))
            .with(inception(g(5), 480, 192, 96, 208, 16, 48, 64))
            .with(inception(g(6), 512, 160, 112, 224, 24, 64, 64))
            .with(inception(g(7), 512, 128, 128, 256, 24, 64, 64))
            .with(inception(g(8), 512, 112, 144, 288, 32, 64, 64))
            .with(inception(g(9), 528, 256, 160, 320, 32, 128, 128))
            .with(MaxPool3d::new([2, 2, 2], [2, 2, 2], [0, 0, 0]))
            .with(inception(g(10), 832, 256, 160, 320, 32, 128, 128))
            .with(inception(g(11), 832, 384, 192, 384, 48, 128, 128));
        let enc = Self {
            config,
            net: PooledNet { trunk },
        };
        if let Some(groups) = &enc.config.trainable_groups {
            check_trainable(groups, &enc.group_names())?;
        }
        Ok(enc)
    }

    /// torchvision `features.{i}` index of a group.
    pub fn feature_index(group: &str) -> Option<usize> {
        S3D_GROUPS.iter().find(|(g, _)| *g == group).map(|&(_, i)| i)
    }

    pub fn group_of_feature(index: usize) -> Option<&'static str> {
        S3D_GROUPS.iter().find(|&&(_, i)| i == index).map(|&(g, _)| g)
    }
}

impl Encoder for S3d {
    fn kind(&self) -> &'static str {
        "s3d"
    }

    fn modality(&self) -> Modality {
        Modality::Video
    }

    fn feature_dim(&self) -> usize {
        S3D_FEATURE_DIM
    }

    fn group_names(&self) -> Vec<String> {
        S3D_GROUPS.iter().map(|(g, _)| g.to_string()).collect()
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.net.trunk.param_specs()
    }

    fn finetune_groups(&self) -> Vec<String> {
        self.config
            .trainable_groups
            .clone()
            .unwrap_or_else(|| vec!["Mixed_4c".into(), "Mixed_5c".into()])
    }

    fn config(&self) -> Value {
        serde_json::to_value(&self.config).expect("serialisable")
    }

    /// Batch-norm statistics are buffers; the affine parameters start at
    /// identity as in an untrained network.
    fn init(&self, seed: u64) -> Result<ModelParams> {
        let mut params = nn::init_params(&self.param_specs(), seed);
        for (_, group) in params.groups_mut() {
            for (name, buf) in group.buffers.iter_mut() {
                if name.ends_with("running_var") {
                    buf.fill(1.0);
                }
            }
        }
        Ok(params)
    }

    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(Array2<f64>, Tape)> {
        let mut x = to_channels_first(x, self.config.input_shape, "S3D")?;
        for (c, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
            plane.mapv_inplace(|v| (v - KINETICS_MEAN[c]) / KINETICS_STD[c]);
        }
        self.net.forward(params, x, mode)
    }

    fn backward(&self, params: &ModelParams, tape: Tape, dfeat: Array2<f64>, grads: &mut Gradients) -> Result<()> {
        self.net.backward(params, tape, dfeat, grads)
    }
}

/// Marks exactly `group_names` trainable; every other group is frozen.
pub fn set_trainable_layers(params: &mut ModelParams, group_names: &[String]) -> Result<TrainabilityMask> {
    params.set_trainable(group_names)
}

/// Loads a video checkpoint for `config`. Keys may be `{group}.{tensor}` or,
/// for S3D, torchvision's `features.{i}.{tensor}` layout (the classifier and
/// `num_batches_tracked` entries are ignored). Trainability follows
/// `config.trainable_groups`, defaulting to the backbone's fine-tune groups.
pub fn load_pretrained_video_weights(path: &Path, config: &VideoEncoderConfig) -> Result<ModelParams> {
    let encoder = config.build()?;
    let named = archive::read_archive(path)?;
    let mut params = ModelParams::new();
    for spec in encoder.param_specs() {
        let mut keys = vec![format!("{}.{}", spec.group, spec.name)];
        if let Some(i) = S3d::feature_index(&spec.group).filter(|_| config.backbone == Backbone::S3d) {
            keys.push(format!("features.{i}.{}", spec.name));
        }
        let array = keys
            .iter()
            .find_map(|k| named.arrays.get(k))
            .ok_or_else(|| Error::MissingTensor(format!("{}.{} (group {})", spec.group, spec.name, spec.group)))?;
        if array.shape() != spec.shape.as_slice() {
            return Err(Error::GroupShape {
                group: spec.group.clone(),
                tensor: spec.name.clone(),
                expected: spec.shape.clone(),
                found: array.shape().to_vec(),
            });
        }
        let group = params.group_or_insert(&spec.group, true);
        let slot = if spec.buffer {
            &mut group.buffers
        } else {
            &mut group.tensors
        };
        slot.insert(spec.name.clone(), array.as_standard_layout().into_owned());
    }
    set_trainable_layers(&mut params, &encoder.finetune_groups())?;
    Ok(params)
}
