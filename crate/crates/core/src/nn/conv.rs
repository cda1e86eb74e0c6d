use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};

use super::{join, Init, Layer, Mode, ParamSpec, Tape};
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

/// (dweight, dbias, dx), each present only when requested.
type Conv3dGrads = (Option<Array2<f64>>, Option<Vec<f64>>, Option<ArrayD<f64>>);

/// Geometry of a 3D convolution over `[channels, time, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
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

    /// Output positions `ow` whose input column `ow·stride + dw - pad` lies
    /// inside `0..w`.
    fn valid_cols(&self, dw: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride[2], self.padding[2]);
        let lo = if p > dw { (p - dw).div_ceil(s) } else { 0 };
        let hi = if w + p > dw {
            (w + p - dw).div_ceil(s).min(wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Fills `cols` (`patch_len × nf·ho·wo`, row-major) with the receptive
    /// fields of output frames `f0..f0 + nf`, where frame `f` is sample
    /// `f / out_t` at output time `f % out_t`.
    fn im2col(&self, xs: &[f64], input: [usize; 3], out: [usize; 3], f0: usize, nf: usize, cols: &mut [f64]) {
        let [t, h, w] = input;
        let [out_t, ho, wo] = out;
        let [kt, kh, kw] = self.kernel;
        let plane = ho * wo;
        let ld = nf * plane;
        let in_vol = t * h * w;
        let padded = self.padding.iter().any(|&p| p > 0);
        if padded {
            cols[..self.patch_len() * ld].fill(0.0);
        }
        for ci in 0..self.cin {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                        let (ow_lo, ow_hi) = self.valid_cols(dw, w, wo);
                        let dst_row = &mut cols[row * ld..(row + 1) * ld];
                        for k in 0..nf {
                            let (b, to) = ((f0 + k) / out_t, (f0 + k) % out_t);
                            let it = (to * self.stride[0] + dt) as isize - self.padding[0] as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let base = b * self.cin * in_vol + (ci * t + it as usize) * h * w;
                            for oh in 0..ho {
                                let ih = (oh * self.stride[1] + dh) as isize - self.padding[1] as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let src = &xs[base + ih as usize * w..base + (ih as usize + 1) * w];
                                let dst = &mut dst_row[k * plane + oh * wo..k * plane + (oh + 1) * wo];
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let iw0 = ow_lo * self.stride[2] + dw - self.padding[2];
                                if self.stride[2] == 1 {
                                    dst[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + (ow_hi - ow_lo)]);
                                } else {
                                    for (j, ow) in (ow_lo..ow_hi).enumerate() {
                                        dst[ow] = src[iw0 + j * self.stride[2]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds `dcols` onto `dx`.
    fn col2im(&self, dcols: &[f64], input: [usize; 3], out: [usize; 3], f0: usize, nf: usize, dx: &mut [f64]) {
        let [t, h, w] = input;
        let [out_t, ho, wo] = out;
        let [kt, kh, kw] = self.kernel;
        let plane = ho * wo;
        let ld = nf * plane;
        let in_vol = t * h * w;
        for ci in 0..self.cin {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                        let (ow_lo, ow_hi) = self.valid_cols(dw, w, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let src_row = &dcols[row * ld..(row + 1) * ld];
                        for k in 0..nf {
                            let (b, to) = ((f0 + k) / out_t, (f0 + k) % out_t);
                            let it = (to * self.stride[0] + dt) as isize - self.padding[0] as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            let base = b * self.cin * in_vol + (ci * t + it as usize) * h * w;
                            for oh in 0..ho {
                                let ih = (oh * self.stride[1] + dh) as isize - self.padding[1] as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let dst = &mut dx[base + ih as usize * w..base + (ih as usize + 1) * w];
                                let src = &src_row[k * plane + oh * wo..k * plane + (oh + 1) * wo];
                                let iw0 = ow_lo * self.stride[2] + dw - self.padding[2];
                                for (j, ow) in (ow_lo..ow_hi).enumerate() {
                                    dst[iw0 + j * self.stride[2]] += src[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output frames (sample, time) per im2col tile, so that one tile holds
    /// at most [`TILE_ELEMS`] values.
    fn frames_per_tile(&self, plane: usize) -> usize {
        (TILE_ELEMS / (self.patch_len() * plane).max(1)).max(1)
    }

    /// Input `[batch, cin, t, h, w]` (standard layout), weight `[cout, patch]`.
    fn forward(&self, x: &ArrayD<f64>, w2: ArrayView2<f64>, bias: Option<&ArrayD<f64>>) -> Result<ArrayD<f64>> {
        let sh = x.shape();
        let (batch, input) = (sh[0], [sh[2], sh[3], sh[4]]);
        let out = self
            .output_dims(input)
            .ok_or_else(|| Error::Shape(format!("input {input:?} smaller than kernel {:?}", self.kernel)))?;
        let in_vol: usize = input.iter().product();
        let plane = out[1] * out[2];
        let out_vol = out[0] * plane;
        let xs = x.as_slice().expect("standard layout");
        let mut y = vec![0.0; batch * self.cout * out_vol];
        if self.is_pointwise() {
            for b in 0..batch {
                let xb = &xs[b * self.cin * in_vol..(b + 1) * self.cin * in_vol];
                let xm = ArrayView2::from_shape((self.cin, in_vol), xb).expect("contiguous");
                let prod = w2.dot(&xm);
                y[b * self.cout * out_vol..(b + 1) * self.cout * out_vol]
                    .copy_from_slice(prod.as_slice().expect("fresh array"));
            }
        } else {
            // frames are (sample, output time) pairs, flattened
            let frames = batch * out[0];
            let per_tile = self.frames_per_tile(plane);
            let mut cols = vec![0.0; self.patch_len() * per_tile.min(frames) * plane];
            for f0 in (0..frames).step_by(per_tile) {
                let nf = per_tile.min(frames - f0);
                let ld = nf * plane;
                self.im2col(xs, input, out, f0, nf, &mut cols);
                let cm = ArrayView2::from_shape((self.patch_len(), ld), &cols[..self.patch_len() * ld]).expect("sized");
                let prod = w2.dot(&cm);
                for k in 0..nf {
                    let (b, to) = ((f0 + k) / out[0], (f0 + k) % out[0]);
                    for co in 0..self.cout {
                        let start = (b * self.cout + co) * out_vol + to * plane;
                        let row = prod.row(co);
                        let src = &row.as_slice().expect("row-major")[k * plane..(k + 1) * plane];
                        y[start..start + plane].copy_from_slice(src);
                    }
                }
            }
        }
        if let Some(bias) = bias {
            for b in 0..batch {
                for (co, bv) in bias.iter().enumerate() {
                    let start = (b * self.cout + co) * out_vol;
                    y[start..start + out_vol].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(ArrayD::from_shape_vec(IxDyn(&[batch, self.cout, out[0], out[1], out[2]]), y).expect("sized"))
    }

    /// Returns (dW as `[cout, patch]`, db, dx).
    fn backward(
        &self,
        x: &ArrayD<f64>,
        w2: ArrayView2<f64>,
        dy: &ArrayD<f64>,
        need_dw: bool,
        need_dx: bool,
    ) -> Conv3dGrads {
        let sh = x.shape();
        let (batch, input) = (sh[0], [sh[2], sh[3], sh[4]]);
        let dsh = dy.shape();
        let out = [dsh[2], dsh[3], dsh[4]];
        let in_vol: usize = input.iter().product();
        let plane = out[1] * out[2];
        let out_vol = out[0] * plane;
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let patch = self.patch_len();

        let mut dw = need_dw.then(|| Array2::<f64>::zeros((self.cout, patch)));
        let mut db = need_dw.then(|| vec![0.0; self.cout]);
        let mut dx = need_dx.then(|| vec![0.0; xs.len()]);

        if let Some(db) = db.as_mut() {
            for b in 0..batch {
                for (co, acc) in db.iter_mut().enumerate() {
                    let start = (b * self.cout + co) * out_vol;
                    *acc += dys[start..start + out_vol].iter().sum::<f64>();
                }
            }
        }
        if self.is_pointwise() {
            for b in 0..batch {
                let xb = &xs[b * self.cin * in_vol..(b + 1) * self.cin * in_vol];
                let dyb = &dys[b * self.cout * out_vol..(b + 1) * self.cout * out_vol];
                let dym = ArrayView2::from_shape((self.cout, in_vol), dyb).expect("contiguous");
                let xm = ArrayView2::from_shape((self.cin, in_vol), xb).expect("contiguous");
                if let Some(dw) = dw.as_mut() {
                    *dw += &dym.dot(&xm.t());
                }
                if let Some(dx) = dx.as_mut() {
                    let g = w2.t().dot(&dym);
                    dx[b * self.cin * in_vol..(b + 1) * self.cin * in_vol]
                        .copy_from_slice(g.as_standard_layout().as_slice().expect("standard"));
                }
            }
        } else {
            let frames = batch * out[0];
            let per_tile = self.frames_per_tile(plane);
            let max_ld = per_tile.min(frames) * plane;
            let mut cols = vec![0.0; if need_dw { patch * max_ld } else { 0 }];
            let mut dy_buf = vec![0.0; self.cout * max_ld];
            for f0 in (0..frames).step_by(per_tile) {
                let nf = per_tile.min(frames - f0);
                let ld = nf * plane;
                for k in 0..nf {
                    let (b, to) = ((f0 + k) / out[0], (f0 + k) % out[0]);
                    for co in 0..self.cout {
                        let start = (b * self.cout + co) * out_vol + to * plane;
                        dy_buf[co * ld + k * plane..co * ld + (k + 1) * plane]
                            .copy_from_slice(&dys[start..start + plane]);
                    }
                }
                let dym = ArrayView2::from_shape((self.cout, ld), &dy_buf[..self.cout * ld]).expect("sized");
                if let Some(dw) = dw.as_mut() {
                    self.im2col(xs, input, out, f0, nf, &mut cols);
                    let cm = ArrayView2::from_shape((patch, ld), &cols[..patch * ld]).expect("sized");
                    ndarray::linalg::general_mat_mul(1.0, &dym, &cm.t(), 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dcols = w2.t().dot(&dym);
                    let dcols = dcols.as_standard_layout();
                    self.col2im(dcols.as_slice().expect("standard"), input, out, f0, nf, dx);
                }
            }
        }
        let dx = dx.map(|v| ArrayD::from_shape_vec(IxDyn(sh), v).expect("sized"));
        (dw, db, dx)
    }
}

/// Upper bound on the values in one im2col tile (16 MiB of f64).
const TILE_ELEMS: usize = 1 << 21;

/// 3D convolution over `[batch, channels, time, height, width]` with weight
/// layout `[cout, cin, kt, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    group: String,
    prefix: String,
    geom: Geometry,
    bias: bool,
}

impl Conv3d {
    pub fn new(group: &str, prefix: &str, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        Self {
            group: group.to_string(),
            prefix: prefix.to_string(),
            geom: Geometry {
                cin,
                cout,
                kernel,
                stride: [1, 1, 1],
                padding: [0, 0, 0],
            },
            bias: true,
        }
    }

    pub fn stride(mut self, stride: [usize; 3]) -> Self {
        self.geom.stride = stride;
        self
    }

    pub fn padding(mut self, padding: [usize; 3]) -> Self {
        self.geom.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.geom.cout
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        self.geom.output_dims(input)
    }

    fn weight_name(&self) -> String {
        join(&self.prefix, "weight")
    }

    fn bias_name(&self) -> String {
        join(&self.prefix, "bias")
    }

    fn weight_matrix<'p>(&self, params: &'p ModelParams) -> Result<ArrayView2<'p, f64>> {
        let w = params.get(&self.group, &self.weight_name())?;
        let flat = w
            .as_slice()
            .ok_or_else(|| Error::Shape("weight not contiguous".into()))?;
        ArrayView2::from_shape((self.geom.cout, self.geom.patch_len()), flat).map_err(|_| {
            Error::Shape(format!(
                "{}.{} has shape {:?}",
                self.group,
                self.weight_name(),
                w.shape()
            ))
        })
    }

    fn check_input(&self, x: &ArrayD<f64>) -> Result<()> {
        if x.ndim() != 5 || x.shape()[1] != self.geom.cin {
            return Err(Error::Shape(format!(
                "{}.{}: expected [batch, {}, t, h, w], found {:?}",
                self.group,
                self.prefix,
                self.geom.cin,
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Layer for Conv3d {
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, _mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        self.check_input(&x)?;
        let x = x.as_standard_layout().into_owned();
        let w2 = self.weight_matrix(params)?;
        let bias = if self.bias {
            Some(params.get(&self.group, &self.bias_name())?)
        } else {
            None
        };
        let y = self.geom.forward(&x, w2, bias).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{}.{}: {m}", self.group, self.prefix)),
            other => other,
        })?;
        Ok((
            y,
            Tape {
                tensors: vec![x],
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
        let x = tape.tensors.pop().expect("conv tape holds its input");
        let dy = dy.as_standard_layout().into_owned();
        let need_dw = params.is_trainable(&self.group);
        let w2 = self.weight_matrix(params)?;
        let (dw, db, dx) = self.geom.backward(&x, w2, &dy, need_dw, need_dx);
        if let Some(dw) = dw {
            let shape = params.get(&self.group, &self.weight_name())?.raw_dim();
            grads.accumulate(
                &self.group,
                &self.weight_name(),
                dw.into_shape_with_order(shape).expect("sized"),
            );
            if self.bias {
                let db = ArrayD::from_shape_vec(IxDyn(&[self.geom.cout]), db.expect("with dw")).expect("sized");
                grads.accumulate(&self.group, &self.bias_name(), db);
            }
        }
        Ok(dx)
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let g = &self.geom;
        let fan_in = g.patch_len();
        let mut specs = vec![ParamSpec::tensor(
            &self.group,
            self.weight_name(),
            vec![g.cout, g.cin, g.kernel[0], g.kernel[1], g.kernel[2]],
            Init::fan_in(fan_in),
        )];
        if self.bias {
            specs.push(ParamSpec::tensor(
                &self.group,
                self.bias_name(),
                vec![g.cout],
                Init::fan_in(fan_in),
            ));
        }
        specs
    }
}

/// Valid 1D convolution over `[batch, channels, length]` with weight layout
/// `[cout, cin, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    inner: Conv3d,
}

impl Conv1d {
    pub fn new(group: &str, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            inner: Conv3d::new(group, prefix, cin, cout, [kernel, 1, 1]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.inner.geom.kernel[0]
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        self.inner.output_dims([len, 1, 1]).map(|d| d[0])
    }
}

impl Layer for Conv1d {
    fn forward(&self, params: &ModelParams, x: ArrayD<f64>, mode: &mut Mode<'_>) -> Result<(ArrayD<f64>, Tape)> {
        if x.ndim() != 3 || x.shape()[1] != self.inner.geom.cin {
            return Err(Error::Shape(format!(
                "{}: expected [batch, {}, length], found {:?}",
                self.inner.group,
                self.inner.geom.cin,
                x.shape()
            )));
        }
        if x.shape()[2] < self.kernel() {
            return Err(Error::Shape(format!(
                "{}: input length {} shorter than kernel {}",
                self.inner.group,
                x.shape()[2],
                self.kernel()
            )));
        }
        let x5 = x.insert_axis(Axis(3)).insert_axis(Axis(4));
        let (y, tape) = self.inner.forward(params, x5, mode)?;
        let y = y.index_axis_move(Axis(4), 0).index_axis_move(Axis(3), 0);
        Ok((y, tape))
    }

    fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        dy: ArrayD<f64>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> Result<Option<ArrayD<f64>>> {
        // the inner gradient already takes the stored [cout, cin, k] shape
        let dy5 = dy.insert_axis(Axis(3)).insert_axis(Axis(4));
        let dx = self.inner.backward(params, tape, dy5, grads, need_dx)?;
        Ok(dx.map(|d| d.index_axis_move(Axis(4), 0).index_axis_move(Axis(3), 0)))
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.inner.param_specs();
        specs[0].shape = vec![self.inner.geom.cout, self.inner.geom.cin, self.kernel()];
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use ndarray::Array;

    /// Direct nested-loop convolution, independent of the im2col path.
    fn naive(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, stride: [usize; 3], pad: [usize; 3]) -> ArrayD<f64> {
        let (bn, cin, t, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let (cout, k) = (w.shape()[0], [w.shape()[2], w.shape()[3], w.shape()[4]]);
        let o: Vec<usize> = (0..3)
            .map(|d| ([t, h, wd][d] + 2 * pad[d] - k[d]) / stride[d] + 1)
            .collect();
        let mut y = ArrayD::zeros(IxDyn(&[bn, cout, o[0], o[1], o[2]]));
        for bi in 0..bn {
            for co in 0..cout {
                for a in 0..o[0] {
                    for bb in 0..o[1] {
                        for c in 0..o[2] {
                            let mut acc = b[[co]];
                            for ci in 0..cin {
                                for dt in 0..k[0] {
                                    for dh in 0..k[1] {
                                        for dw in 0..k[2] {
                                            let it = (a * stride[0] + dt) as isize - pad[0] as isize;
                                            let ih = (bb * stride[1] + dh) as isize - pad[1] as isize;
                                            let iw = (c * stride[2] + dw) as isize - pad[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                            if it >= t || ih >= h || iw >= wd {
                                                continue;
                                            }
                                            acc += w[[co, ci, dt, dh, dw]] * x[[bi, ci, it, ih, iw]];
                                        }
                                    }
                                }
                            }
                            y[[bi, co, a, bb, c]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn strided_padded_conv_matches_nested_loops() {
        let conv = Conv3d::new("g", "c", 2, 3, [3, 3, 2])
            .stride([1, 2, 2])
            .padding([1, 1, 0]);
        let params = init_params(&conv.param_specs(), 3);
        let x = Array::from_shape_fn((2, 2, 4, 5, 6), |(a, b, c, d, e)| {
            ((a * 7 + b * 5 + c * 3 + d * 2 + e) as f64 * 0.37).sin()
        })
        .into_dyn();
        let (y, _) = conv.forward(&params, x.clone(), &mut Mode::Eval).unwrap();
        let expect = naive(
            &x,
            params.get("g", "c.weight").unwrap(),
            params.get("g", "c.bias").unwrap(),
            [1, 2, 2],
            [1, 1, 0],
        );
        assert_eq!(y.shape(), expect.shape());
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_conv_matches_nested_loops() {
        let conv = Conv3d::new("g", "", 3, 2, [1, 1, 1]);
        let params = init_params(&conv.param_specs(), 1);
        let x = Array::from_shape_fn((1, 3, 2, 3, 3), |(_, b, c, d, e)| (b + c * d) as f64 - e as f64).into_dyn();
        let (y, _) = conv.forward(&params, x.clone(), &mut Mode::Eval).unwrap();
        let expect = naive(
            &x,
            params.get("g", "weight").unwrap(),
            params.get("g", "bias").unwrap(),
            [1, 1, 1],
            [0, 0, 0],
        );
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_valid_length_and_weight_shape() {
        let conv = Conv1d::new("Block_1", "conv", 6, 4, 24);
        assert_eq!(conv.param_specs()[0].shape, vec![4, 6, 24]);
        assert_eq!(conv.output_len(160), Some(137));
        let params = init_params(&conv.param_specs(), 0);
        let (y, _) = conv
            .forward(&params, ArrayD::zeros(IxDyn(&[2, 6, 160])), &mut Mode::Eval)
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 137]);
        let err = conv
            .forward(&params, ArrayD::zeros(IxDyn(&[1, 6, 20])), &mut Mode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("Block_1"));
    }
}
