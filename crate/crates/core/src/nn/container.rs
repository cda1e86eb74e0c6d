use ndarray::{concatenate, ArrayD, Axis, Slice};

use super::{Layer, Mode, ParamSpec, Tape};
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

#[derive(Debug, Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Eval-mode forward that records the output shape of every layer.
    pub fn trace_shapes(&self, params: &ModelParams, mut x: ArrayD<f64>) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(params, x, &mut Mode::Eval)?.0;
            shapes.push(x.shape().to_vec());
        }
        Ok(shapes)
    }
}

impl Layer for Sequential {
    fn forward(&self, params: &ModelParams, mut x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        let mut children = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, tape) = layer.forward(params, x, mode)?;
            children.push(tape);
            x = y;
        }
        Ok((
            x,
            Tape {
                children,
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        // upstream[i]: some layer before i still needs a gradient.
        let mut upstream = Vec::with_capacity(self.layers.len());
        let mut any = need_dx;
        for layer in &self.layers {
            upstream.push(any);
            any = any || layer.has_trainable(params);
        }
        let mut grad = Some(dy);
        for ((layer, child), need) in self.layers.iter().zip(tape.children).zip(upstream).rev() {
            let Some(g) = grad.take() else { break };
            if !need && !layer.has_trainable(params) {
                break;
            }
            grad = layer.backward(params, child, g, grads, need)?;
        }
        Ok(if need_dx { grad } else { None })
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.param_specs()).collect()
    }

    fn has_trainable(&self, params: &ModelParams) -> bool {
        self.layers.iter().any(|l| l.has_trainable(params))
    }
}

/// Runs every branch on the same input and concatenates along channels.
#[derive(Debug, Default)]
pub struct Concat {
    branches: Vec<Box<dyn Layer>>,
}

impl Concat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, branch: impl Layer + 'static) -> Self {
        self.branches.push(Box::new(branch));
        self
    }
}

impl Layer for Concat {
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut children = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, t) = b.forward(params, x.clone(), mode)?;
            outs.push(y);
            children.push(t);
        }
        let dims = outs.iter().map(|o| o.shape()[1]).collect();
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        let y = concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("branch outputs disagree: {e}")))?;
        Ok((
            y,
            Tape {
                children,
                dims,
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        let mut dx: Option<ArrayD<f64>> = None;
        let mut start = 0;
        for ((branch, child), width) in self.branches.iter().zip(tape.children).zip(tape.dims) {
            let part = dy.slice_axis(Axis(1), Slice::from(start..start + width)).to_owned();
            start += width;
            if !need_dx && !branch.has_trainable(params) {
                continue;
            }
            if let Some(g) = branch.backward(params, child, part, grads, need_dx)? {
                match dx.as_mut() {
                    Some(acc) => *acc += &g,
                    None => dx = Some(g),
                }
            }
        }
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        self.branches.iter().flat_map(|l| l.param_specs()).collect()
    }

    fn has_trainable(&self, params: &ModelParams) -> bool {
        self.branches.iter().any(|l| l.has_trainable(params))
    }
}
