use ndarray::{ArrayD, IxDyn};

use super::{Layer, Mode, Tape};
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

/// Max pooling over `[batch, channels, t, h, w]`; padded cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl MaxPool3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            if padded < self.kernel[d] {
                return None;
            }
            out[d] = (padded - self.kernel[d]) / self.stride[d] + 1;
        }
        Some(out)
    }
}

impl Layer for MaxPool3d {
    fn forward(&self, _params: &ModelParams, x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        if x.ndim() != 5 {
            return Err(Error::Shape(format!(
                "max-pool expects 5-d input, found {:?}",
                x.shape()
            )));
        }
        let x = x.as_standard_layout().into_owned();
        let sh = x.shape().to_vec();
        let input = [sh[2], sh[3], sh[4]];
        let out = self.output_dims(input).ok_or_else(|| {
            Error::Shape(format!(
                "max-pool input {input:?} smaller than kernel {:?}",
                self.kernel
            ))
        })?;
        let xs = x.as_slice().expect("standard layout");
        let planes = sh[0] * sh[1];
        let in_vol: usize = input.iter().product();
        let out_vol: usize = out.iter().product();
        let mut y = Vec::with_capacity(planes * out_vol);
        let mut argmax = Vec::with_capacity(planes * out_vol);
        for p in 0..planes {
            let base = p * in_vol;
            for ot in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for dt in 0..self.kernel[0] {
                            let it = (ot * self.stride[0] + dt) as isize - self.padding[0] as isize;
                            if it < 0 || it as usize >= input[0] {
                                continue;
                            }
                            for dh in 0..self.kernel[1] {
                                let ih = (oh * self.stride[1] + dh) as isize - self.padding[1] as isize;
                                if ih < 0 || ih as usize >= input[1] {
                                    continue;
                                }
                                for dw in 0..self.kernel[2] {
                                    let iw = (ow * self.stride[2] + dw) as isize - self.padding[2] as isize;
                                    if iw < 0 || iw as usize >= input[2] {
                                        continue;
                                    }
                                    let idx = base + ((it as usize * input[1]) + ih as usize) * input[2] + iw as usize;
                                    if xs[idx] > best || best_idx == usize::MAX {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[sh[0], sh[1], out[0], out[1], out[2]]), y).expect("sized");
        Ok((
            y,
            Tape {
                indices: argmax,
                dims: sh,
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        _params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        _grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        if !need_dx {
            return Ok(None);
        }
        let mut dx = ArrayD::zeros(IxDyn(&tape.dims));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (&idx, g) in tape.indices.iter().zip(dy.iter()) {
            dxs[idx] += g;
        }
        Ok(Some(dx))
    }
}

/// Mean over every axis after the channel axis: `[batch, c, ...] → [batch, c]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    fn forward(&self, _params: &ModelParams, x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        if x.ndim() < 3 {
            return Err(Error::Shape(format!(
                "global pooling expects [batch, c, ...], found {:?}",
                x.shape()
            )));
        }
        let sh = x.shape().to_vec();
        let inner: usize = sh[2..].iter().product();
        let x = x.as_standard_layout().into_owned();
        let flat = x.into_shape_with_order((sh[0], sh[1], inner)).expect("contiguous");
        let y = flat.mean_axis(ndarray::Axis(2)).expect("inner > 0");
        Ok((
            y.into_dyn(),
            Tape {
                dims: sh,
                ..Default::default()
            },
        ))
    }

    fn backward(
        &self,
        _params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        _grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        if !need_dx {
            return Ok(None);
        }
        let sh = tape.dims;
        let inner: usize = sh[2..].iter().product();
        let scale = 1.0 / inner as f64;
        let mut dx = Vec::with_capacity(sh.iter().product());
        for g in dy.iter() {
            dx.extend(std::iter::repeat_n(g * scale, inner));
        }
        Ok(Some(ArrayD::from_shape_vec(IxDyn(&sh), dx).expect("sized")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let pool = MaxPool3d::new([1, 2, 2], [1, 2, 2], [0, 0, 0]);
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2, 2]), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, tape) = pool.forward(&ModelParams::new(), x, &mut Mode::Eval).unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![4.0]);
        let dx = pool
            .backward(
                &ModelParams::new(),
                tape,
                ArrayD::ones(IxDyn(&[1, 1, 1, 1, 1])),
                &mut Gradients::new(),
                true,
            )
            .unwrap()
            .unwrap();
        assert_eq!(dx.iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_maxpool_keeps_size() {
        let pool = MaxPool3d::new([3, 3, 3], [1, 1, 1], [1, 1, 1]);
        let x = ArrayD::from_elem(IxDyn(&[1, 2, 3, 4, 5]), -2.0);
        let (y, _) = pool.forward(&ModelParams::new(), x, &mut Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 4, 5]);
        assert!(y.iter().all(|&v| v == -2.0));
    }
}
