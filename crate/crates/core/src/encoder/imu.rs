use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Encoder, PooledNet};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Dropout, Layer, Mode, ParamSpec, Relu, Sequential, Tape};
use crate::params::{Gradients, ModelParams};

/// Three valid 1D-convolution blocks (conv, dropout, ReLU) followed by
/// global average pooling over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuEncoderConfig {
    pub in_channels: usize,
    pub block_channels: [usize; 3],
    pub kernel_sizes: [usize; 3],
    pub dropout_rate: f64,
    /// Shortest sequence the encoder must accept; checked against the
    /// kernels at construction.
    pub min_input_len: usize,
}

impl Default for ImuEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            block_channels: [64, 128, 256],
            kernel_sizes: [24, 16, 8],
            dropout_rate: 0.2,
            min_input_len: 46,
        }
    }
}

impl ImuEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.block_channels[2]
    }

    /// Smallest length for which every block output is non-empty.
    pub fn required_len(&self) -> usize {
        self.kernel_sizes.iter().sum::<usize>() - (self.kernel_sizes.len() - 1)
    }

    /// Temporal length after each block.
    pub fn block_lengths(&self, len: usize) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        let mut l = len;
        for (i, &k) in self.kernel_sizes.iter().enumerate() {
            if l < k {
                return Err(Error::Shape(format!(
                    "{}: length {l} is shorter than kernel {k} (input length {len}, need ≥ {})",
                    BLOCKS[i],
                    self.required_len()
                )));
            }
            l = l - k + 1;
            out[i] = l;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.block_channels.contains(&0) || self.kernel_sizes.contains(&0) {
            return Err(Error::Config("IMU encoder channels and kernels must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.required_len() > self.min_input_len {
            return Err(Error::Config(format!(
                "kernels {:?} need inputs of ≥ {} steps but min_input_len is {}",
                self.kernel_sizes,
                self.required_len(),
                self.min_input_len
            )));
        }
        Ok(())
    }
}

const BLOCKS: [&str; 3] = ["Block_1", "Block_2", "Block_3"];

#[derive(Debug)]
pub struct ImuEncoder {
    config: ImuEncoderConfig,
    net: PooledNet,
}

impl ImuEncoder {
    pub fn new(config: ImuEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut trunk = Sequential::new();
        let mut cin = config.in_channels;
        for (i, group) in BLOCKS.iter().enumerate() {
            let cout = config.block_channels[i];
            trunk
                .push(Conv1d::new(group, "conv", cin, cout, config.kernel_sizes[i]))
                .push(Dropout::new(config.dropout_rate)?)
                .push(Relu);
            cin = cout;
        }
        Ok(Self {
            config,
            net: PooledNet { trunk },
        })
    }

    pub fn settings(&self) -> &ImuEncoderConfig {
        &self.config
    }

    /// `[batch, channels, length]` after each block, from an eval-mode pass.
    pub fn block_shapes(&self, params: &ModelParams, x: ArrayD<f64>) -> Result<Vec<Vec<usize>>> {
        let per_layer = self.net.trunk.trace_shapes(params, x)?;
        Ok(per_layer
            .chunks(per_layer.len() / BLOCKS.len())
            .map(|c| c[c.len() - 1].clone())
            .collect())
    }
}

impl Encoder for ImuEncoder {
    fn kind(&self) -> &'static str {
        "imu_cnn1d"
    }

    fn modality(&self) -> Modality {
        Modality::Imu
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn group_names(&self) -> Vec<String> {
        BLOCKS.iter().map(|s| s.to_string()).collect()
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.net.trunk.param_specs()
    }

    fn finetune_groups(&self) -> Vec<String> {
        self.group_names()
    }

    fn config(&self) -> Value {
        serde_json::to_value(&self.config).expect("serialisable")
    }

    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(Array2<f64>, Tape)> {
        if x.ndim() != 3 || x.shape()[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "IMU encoder expects [batch, {}, length], found {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        self.config.block_lengths(x.shape()[2])?;
        self.net.forward(params, x, mode)
    }

    fn backward(&self, params: &ModelParams, tape: Tape, dfeat: Array2<f64>, grads: &mut Gradients) -> Result<()> {
        self.net.backward(params, tape, dfeat, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn default_lengths_for_160_steps() {
        assert_eq!(ImuEncoderConfig::default().block_lengths(160).unwrap(), [137, 122, 115]);
        assert_eq!(ImuEncoderConfig::default().required_len(), 46);
    }

    #[test]
    fn short_input_names_the_block() {
        let err = ImuEncoderConfig::default().block_lengths(45).unwrap_err().to_string();
        assert!(err.contains("Block_3"), "{err}");
        let err = ImuEncoderConfig::default().block_lengths(30).unwrap_err().to_string();
        assert!(err.contains("Block_2"), "{err}");
    }

    #[test]
    fn kernels_longer_than_min_input_are_rejected() {
        let cfg = ImuEncoderConfig {
            min_input_len: 40,
            ..Default::default()
        };
        assert!(matches!(ImuEncoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn first_block_weight_shape() {
        let enc = ImuEncoder::new(ImuEncoderConfig::default()).unwrap();
        let p = enc.init(0).unwrap();
        assert_eq!(p.get("Block_1", "conv.weight").unwrap().shape(), &[64, 6, 24]);
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_features() {
        let cfg = ImuEncoderConfig {
            in_channels: 2,
            block_channels: [4, 4, 4],
            ..Default::default()
        };
        let enc = ImuEncoder::new(cfg).unwrap();
        let mut p = enc.init(1).unwrap();
        for g in ["Block_1", "Block_2", "Block_3"] {
            p.group_mut(g).unwrap().tensors["conv.bias"].fill(0.0);
        }
        let (y, _) = enc
            .forward(&p, Array3::zeros((3, 2, 64)).into_dyn(), &mut Mode::Eval)
            .unwrap();
        assert_eq!(y.dim(), (3, 4));
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
