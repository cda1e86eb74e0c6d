use ndarray::{Array2, ArrayD, Axis, Ix2};
use rand::Rng;

use super::{join, Init, Layer, Mode, ParamSpec, Tape};
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

#[derive(Debug, Clone, Default)]
pub struct Relu;

impl Layer for Relu {
    fn forward(&self, _params: &ModelParams, mut x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        x.mapv_inplace(|v| v.max(0.0));
        let tape = Tape {
            tensors: vec![x.clone()],
            ..Default::default()
        };
        Ok((x, tape))
    }

    fn backward(
        &self,
        _params: &ModelParams,
        mut tape: Tape,
        mut dy: ArrayD<f64>,
        _grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        if !need_dx {
            return Ok(None);
        }
        let y = tape.tensors.pop().expect("relu tape holds its output");
        ndarray::Zip::from(&mut dy).and(&y).for_each(|d, &v| {
            if v <= 0.0 {
                *d = 0.0;
            }
        });
        Ok(Some(dy))
    }
}

/// Inverted dropout; the identity outside training mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Self { rate })
    }
}

impl Layer for Dropout {
    fn forward(&self, _params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        match mode {
            Mode::Train(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let mask = x.mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                let y = &x * &mask;
                Ok((
                    y,
                    Tape {
                        tensors: vec![mask],
                        ..Default::default()
                    },
                ))
            }
            _ => Ok((x, Tape::default())),
        }
    }

    fn backward(
        &self,
        _params: &ModelParams,
        mut tape: Tape,
        dy: ArrayD<f64>,
        _grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        if !need_dx {
            return Ok(None);
        }
        Ok(Some(match tape.tensors.pop() {
            Some(mask) => dy * mask,
            None => dy,
        }))
    }
}

/// Fully connected layer over `[batch, in]`, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    group: String,
    prefix: String,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(group: &str, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            group: group.to_string(),
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
        }
    }

    fn names(&self) -> (String, String) {
        (join(&self.prefix, "weight"), join(&self.prefix, "bias"))
    }

    fn weight<'p>(&self, params: &'p ModelParams) -> Result<ndarray::ArrayView2<'p, f64>> {
        params
            .get(&self.group, &self.names().0)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(format!("{}: {e}", self.group)))
    }
}

impl Layer for Linear {
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        if x.ndim() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Shape(format!(
                "{}: expected [batch, {}], found {:?}",
                self.group,
                self.in_dim,
                x.shape()
            )));
        }
        let x2 = x.into_dimensionality::<Ix2>().expect("checked rank");
        let w = self.weight(params)?;
        let b = params.get(&self.group, &self.names().1)?;
        let mut y = x2.dot(&w.t());
        y += &b.view().into_dimensionality::<ndarray::Ix1>().expect("bias is 1-d");
        Ok((
            y.into_dyn(),
            Tape {
                tensors: vec![x2.into_dyn()],
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        params: &ModelParams,
        mut tape: Tape,
        dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        let x: Array2<f64> = tape
            .tensors
            .pop()
            .expect("linear tape holds its input")
            .into_dimensionality()
            .expect("2-d");
        let dy: Array2<f64> = dy.into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?;
        if params.is_trainable(&self.group) {
            let (wn, bn) = self.names();
            grads.accumulate(&self.group, &wn, dy.t().dot(&x).into_dyn());
            grads.accumulate(&self.group, &bn, dy.sum_axis(Axis(0)).into_dyn());
        }
        if need_dx {
            let w = self.weight(params)?;
            return Ok(Some(dy.dot(&w).into_dyn()));
        }
        Ok(None)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let (wn, bn) = self.names();
        vec![
            ParamSpec::tensor(
                &self.group,
                wn,
                vec![self.out_dim, self.in_dim],
                Init::fan_in(self.in_dim),
            ),
            ParamSpec::tensor(&self.group, bn, vec![self.out_dim], Init::fan_in(self.in_dim)),
        ]
    }
}
