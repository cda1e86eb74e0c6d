use ndarray::{ArrayD, Axis, IxDyn};

use super::{join, Init, Layer, Mode, ParamSpec, Tape};
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

/// Batch normalisation that always normalises with the stored running
/// statistics. The affine scale and shift train with their group; the
/// statistics are buffers and never change.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    group: String,
    prefix: String,
    channels: usize,
    eps: f64,
}

impl FrozenBatchNorm {
    pub fn new(group: &str, prefix: &str, channels: usize, eps: f64) -> Self {
        Self {
            group: group.to_string(),
            prefix: prefix.to_string(),
            channels,
            eps,
        }
    }

    fn name(&self, field: &str) -> String {
        join(&self.prefix, field)
    }

    /// Per-channel (inverse std, mean).
    fn stats(&self, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = params.get(&self.group, &self.name("running_mean"))?;
        let var = params.get(&self.group, &self.name("running_var"))?;
        let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok((inv, mean.iter().copied().collect()))
    }

    fn check(&self, x: &ArrayD<f64>) -> Result<()> {
        if x.ndim() < 2 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "{}.{}: expected {} channels, found {:?}",
                self.group,
                self.prefix,
                self.channels,
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Layer for FrozenBatchNorm {
    fn forward(&self, params: &ModelParams, mut x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        self.check(&x)?;
        let (inv, mean) = self.stats(params)?;
        let gamma = params.get(&self.group, &self.name("weight"))?;
        let beta = params.get(&self.group, &self.name("bias"))?;
        let input = x.clone();
        for mut sample in x.axis_iter_mut(Axis(0)) {
            for (c, mut chan) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let scale = gamma[[c]] * inv[c];
                let shift = beta[[c]] - mean[c] * scale;
                chan.mapv_inplace(|v| v * scale + shift);
            }
        }
        Ok((
            x,
            Tape {
                tensors: vec![input],
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        params: &ModelParams,
        mut tape: Tape,
        mut dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        let x = tape.tensors.pop().expect("batch-norm tape holds its input");
        let (inv, mean) = self.stats(params)?;
        if params.is_trainable(&self.group) {
            let mut dgamma = vec![0.0; self.channels];
            let mut dbeta = vec![0.0; self.channels];
            for (xs, ds) in x.axis_iter(Axis(0)).zip(dy.axis_iter(Axis(0))) {
                for c in 0..self.channels {
                    let (xc, dc) = (xs.index_axis(Axis(0), c), ds.index_axis(Axis(0), c));
                    for (xv, dv) in xc.iter().zip(dc.iter()) {
                        dgamma[c] += dv * (xv - mean[c]) * inv[c];
                        dbeta[c] += dv;
                    }
                }
            }
            let to_arr = |v: Vec<f64>| ArrayD::from_shape_vec(IxDyn(&[self.channels]), v).expect("sized");
            grads.accumulate(&self.group, &self.name("weight"), to_arr(dgamma));
            grads.accumulate(&self.group, &self.name("bias"), to_arr(dbeta));
        }
        if !need_dx {
            return Ok(None);
        }
        let gamma = params.get(&self.group, &self.name("weight"))?;
        for mut sample in dy.axis_iter_mut(Axis(0)) {
            for (c, mut chan) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let scale = gamma[[c]] * inv[c];
                chan.mapv_inplace(|v| v * scale);
            }
        }
        Ok(Some(dy))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = vec![self.channels];
        vec![
            ParamSpec::tensor(&self.group, self.name("weight"), c.clone(), Init::Ones),
            ParamSpec::tensor(&self.group, self.name("bias"), c.clone(), Init::Zeros),
            ParamSpec::buffer(&self.group, self.name("running_mean"), c.clone(), Init::Zeros),
            ParamSpec::buffer(&self.group, self.name("running_var"), c, Init::Ones),
        ]
    }
}
