//! Feature concatenation, the two-layer MLP head, cross-entropy, and the
//! composite model used by both training stages.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{concatenate, s, Array1, Array2, ArrayD, Axis, Ix2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive;
use crate::data::Modality;
use crate::encoder::{Encoder, EncoderRegistry};
use crate::error::{Error, Result};
use crate::nn::{self, Layer, Linear, Mode, ParamSpec, Relu, Sequential, Tape};
use crate::params::{Gradients, ModelParams};

/// Row-wise concatenation `[a | b]`.
pub fn fuse_features(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "cannot fuse batches of {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts checked"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl MlpHeadConfig {
    pub const DEFAULT_HIDDEN: usize = 512;

    pub fn new(in_dim: usize, num_classes: usize) -> Self {
        Self {
            in_dim,
            hidden_dim: Self::DEFAULT_HIDDEN,
            num_classes,
        }
    }
}

pub const HEAD_GROUP: &str = "head";

/// Linear → ReLU → Linear.
#[derive(Debug)]
pub struct MlpHead {
    config: MlpHeadConfig,
    net: Sequential,
}

impl MlpHead {
    pub fn new(config: MlpHeadConfig) -> Result<Self> {
        if config.in_dim == 0 || config.hidden_dim == 0 || config.num_classes == 0 {
            return Err(Error::Config(format!("MLP head dimensions must be ≥ 1: {config:?}")));
        }
        let net = Sequential::new()
            .with(Linear::new(HEAD_GROUP, "fc1", config.in_dim, config.hidden_dim))
            .with(Relu)
            .with(Linear::new(HEAD_GROUP, "fc2", config.hidden_dim, config.num_classes));
        Ok(Self { config, net })
    }

    pub fn config(&self) -> MlpHeadConfig {
        self.config
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.net.param_specs()
    }

    pub fn init(&self, seed: u64) -> ModelParams {
        nn::init_params(&self.param_specs(), seed)
    }

    pub fn forward(&self, params: &ModelParams, features: &Array2<f64>) -> Result<(ClassLogits, Tape)> {
        let (y, tape) = self.net.forward(params, features.clone().into_dyn(), &mut Mode::Eval)?;
        let values = y
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((ClassLogits { values }, tape))
    }

    /// Returns `d loss / d features`.
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: Tape,
        dlogits: Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let dx = self
            .net
            .backward(params, tape, dlogits.into_dyn(), grads, true)?
            .expect("requested");
        dx.into_dimensionality::<Ix2>().map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Eval-mode head forward.
pub fn mlp_forward(head: &MlpHead, params: &ModelParams, features: &Array2<f64>) -> Result<ClassLogits> {
    Ok(head.forward(params, features)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits {
    pub values: Array2<f64>,
}

impl ClassLogits {
    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Arg-max per row; ties go to the smallest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

fn check_labels(labels: &[usize], num_classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    Ok(())
}

fn log_softmax(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Mean negative log-likelihood of `labels`, stabilised with log-sum-exp.
pub fn cross_entropy_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss and `d loss / d logits` = (softmax − onehot) / batch.
pub fn cross_entropy_with_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(labels, logits.ncols(), logits.nrows())?;
    let n = logits.nrows().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let lp = log_softmax(row);
        loss -= lp[label];
        let mut g = grad.row_mut(i);
        g.assign(&lp.mapv(f64::exp));
        g[label] -= 1.0;
    }
    grad /= n;
    Ok((loss / n, grad))
}

/// An encoder and its parameters.
#[derive(Debug)]
pub struct EncoderPart {
    pub encoder: Box<dyn Encoder>,
    pub params: ModelParams,
}

/// One modality's input to [`FusedModel::forward`]: the batch for the rows
/// that may use this modality, and those row positions.
#[derive(Debug)]
pub struct PartInput {
    pub modality: Modality,
    pub x: ArrayD<f64>,
    pub rows: Vec<usize>,
}

#[derive(Debug)]
pub struct FusedTape {
    head: Tape,
    parts: Vec<Option<(Tape, Vec<usize>)>>,
}

/// Encoders whose features are concatenated (in `parts` order) and fed to
/// one MLP head. Rows without a given modality contribute zero features.
/// A single-part model is a stage-1 classifier.
#[derive(Debug)]
pub struct FusedModel {
    pub parts: Vec<EncoderPart>,
    pub head: MlpHead,
    pub head_params: ModelParams,
}

impl FusedModel {
    pub fn feature_dim(&self) -> usize {
        self.parts.iter().map(|p| p.encoder.feature_dim()).sum()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.parts.iter().map(|p| p.encoder.modality()).collect()
    }

    pub fn part(&self, m: Modality) -> Option<&EncoderPart> {
        self.parts.iter().find(|p| p.encoder.modality() == m)
    }

    pub fn num_classes(&self) -> usize {
        self.head.config().num_classes
    }

    pub fn forward(
        &self,
        inputs: Vec<PartInput>,
        batch: usize,
        mode: &mut Mode<'_>,
    ) -> Result<(ClassLogits, FusedTape)> {
        let mut blocks = Vec::with_capacity(self.parts.len());
        let mut tapes = Vec::with_capacity(self.parts.len());
        let mut inputs: Vec<Option<PartInput>> = inputs.into_iter().map(Some).collect();
        for part in &self.parts {
            let m = part.encoder.modality();
            let mut feats = Array2::zeros((batch, part.encoder.feature_dim()));
            let input = inputs
                .iter_mut()
                .find(|i| i.as_ref().is_some_and(|i| i.modality == m))
                .and_then(Option::take);
            match input {
                Some(input) if !input.rows.is_empty() => {
                    let (f, tape) = part.encoder.forward(&part.params, input.x, mode)?;
                    if f.nrows() != input.rows.len() {
                        return Err(Error::Shape(format!(
                            "{m} batch has {} rows but {} row positions",
                            f.nrows(),
                            input.rows.len()
                        )));
                    }
                    for (src, &dst) in input.rows.iter().enumerate() {
                        feats.row_mut(dst).assign(&f.row(src));
                    }
                    tapes.push(Some((tape, input.rows)));
                }
                _ => tapes.push(None),
            }
            blocks.push(feats);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let features = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let (logits, head) = self.head.forward(&self.head_params, &features)?;
        Ok((logits, FusedTape { head, parts: tapes }))
    }

    /// Gradients for the head and for each part, in `parts` order.
    pub fn backward(&self, tape: FusedTape, dlogits: Array2<f64>) -> Result<(Gradients, Vec<Gradients>)> {
        let mut head_grads = Gradients::new();
        let dfeat = self
            .head
            .backward(&self.head_params, tape.head, dlogits, &mut head_grads)?;
        let mut part_grads = Vec::with_capacity(self.parts.len());
        let mut offset = 0;
        for (part, t) in self.parts.iter().zip(tape.parts) {
            let d = part.encoder.feature_dim();
            let mut g = Gradients::new();
            if let Some((t, rows)) = t {
                let block = dfeat.slice(s![.., offset..offset + d]);
                let mut dsel = Array2::zeros((rows.len(), d));
                for (dst, &src) in rows.iter().enumerate() {
                    dsel.row_mut(dst).assign(&block.row(src));
                }
                part.encoder.backward(&part.params, t, dsel, &mut g)?;
            }
            part_grads.push(g);
            offset += d;
        }
        Ok((head_grads, part_grads))
    }
}

fn prefix_of(m: Modality) -> &'static str {
    match m {
        Modality::Imu => "imu",
        Modality::Video => "video",
    }
}

/// Bundles every part, the head, and all configs into one archive.
pub fn save_model(path: &Path, model: &FusedModel, extra: Value) -> Result<()> {
    let mut arrays = IndexMap::new();
    let mut parts = Vec::new();
    for part in &model.parts {
        let prefix = prefix_of(part.encoder.modality());
        let groups = archive::flatten_params(&part.params, prefix, &mut arrays);
        parts.push(json!({
            "prefix": prefix,
            "kind": part.encoder.kind(),
            "config": part.encoder.config(),
            "groups": groups,
        }));
    }
    let head_groups = archive::flatten_params(&model.head_params, "head", &mut arrays);
    let header = json!({
        "format": "fusehar-model/1",
        "parts": parts,
        "head": { "config": model.head.config(), "groups": head_groups },
        "extra": extra,
    });
    archive::write_archive(path, &arrays, &header)
}

pub fn load_model(path: &Path, registry: &EncoderRegistry) -> Result<(FusedModel, Value)> {
    let named = archive::read_archive(path)?;
    let h = &named.header;
    if h["format"] != "fusehar-model/1" {
        return Err(Error::Archive(format!("{} is not a model checkpoint", path.display())));
    }
    let mut parts = Vec::new();
    for p in h["parts"].as_array().into_iter().flatten() {
        let kind = p["kind"].as_str().unwrap_or_default();
        let encoder = registry.build(kind, &p["config"])?;
        let prefix = p["prefix"].as_str().unwrap_or_default();
        let params = archive::unflatten_params(&named.arrays, prefix, &p["groups"])?;
        nn::check_params(&encoder.param_specs(), &params)?;
        parts.push(EncoderPart { encoder, params });
    }
    let config: MlpHeadConfig = serde_json::from_value(h["head"]["config"].clone())?;
    let head = MlpHead::new(config)?;
    let head_params = archive::unflatten_params(&named.arrays, "head", &h["head"]["groups"])?;
    nn::check_params(&head.param_specs(), &head_params)?;
    Ok((
        FusedModel {
            parts,
            head,
            head_params,
        },
        h["extra"].clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn fuse_concatenates_rows() {
        let f = fuse_features(&array![[1.0, 2.0]], &array![[3.0]]).unwrap();
        assert_eq!(f, array![[1.0, 2.0, 3.0]]);
        assert!(fuse_features(&Array2::zeros((2, 1)), &Array2::zeros((3, 1))).is_err());
        assert_eq!(
            fuse_features(&Array2::zeros((1, 256)), &Array2::zeros((1, 1024)))
                .unwrap()
                .ncols(),
            1280
        );
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_abs_diff_eq!(
            cross_entropy_loss(&Array2::zeros((3, 27)), &[0, 5, 26]).unwrap(),
            27f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cross_entropy_loss(&array![[1.0, 0.0]], &[0]).unwrap(),
            (1.0 + (-1f64).exp()).ln(),
            epsilon = 1e-12
        );
        assert!(cross_entropy_loss(&array![[1000.0, 0.0, 0.0]], &[0]).unwrap() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&array![[0.0, 0.0]], &[2]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn loss_is_shift_invariant() {
        let l = array![[0.3, -1.2, 2.0], [5.0, 5.0, -3.0]];
        let a = cross_entropy_loss(&l, &[2, 1]).unwrap();
        let b = cross_entropy_loss(&(&l + 123.0), &[2, 1]).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn hand_set_head() {
        let head = MlpHead::new(MlpHeadConfig {
            in_dim: 2,
            hidden_dim: 2,
            num_classes: 2,
        })
        .unwrap();
        let mut p = head.init(0);
        let g = p.group_mut(HEAD_GROUP).unwrap();
        g.tensors["fc1.weight"] = array![[1.0, -1.0], [0.5, 2.0]].into_dyn();
        g.tensors["fc1.bias"] = array![0.0, -1.0].into_dyn();
        g.tensors["fc2.weight"] = array![[1.0, 1.0], [2.0, -1.0]].into_dyn();
        g.tensors["fc2.bias"] = array![0.5, 0.0].into_dyn();
        // x = [1, 2]: hidden = relu([-1, 4.5 - 1]) = [0, 3.5]; logits = [3.5 + 0.5, -3.5]
        let logits = mlp_forward(&head, &p, &array![[1.0, 2.0]]).unwrap();
        assert_eq!(logits.values, array![[4.0, -3.5]]);
        assert_eq!(logits.predictions(), vec![0]);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let head = MlpHead::new(MlpHeadConfig::new(3, 4)).unwrap();
        let mut p = head.init(1);
        p.group_mut(HEAD_GROUP)
            .unwrap()
            .tensors
            .values_mut()
            .for_each(|t| t.fill(0.0));
        let l = mlp_forward(&head, &p, &array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(l.values.dim(), (2, 4));
        assert!(l.values.iter().all(|&v| v == 0.0));
    }
}
