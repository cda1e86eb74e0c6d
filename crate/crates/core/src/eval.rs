//! Top-k accuracy, macro-F1 and test-set evaluation.
//!
//! Ranking ties go to the smaller class index, the same rule
//! [`ClassLogits::predictions`](crate::fusion::ClassLogits::predictions) uses.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{BatchBuilder, DatasetIndex, LabeledSample};
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::nn::Mode;
use crate::training::{assemble_inputs, Condition};

const EVAL_BATCH: usize = 32;

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Position of `label` when row `row` is sorted by descending score, ties
/// broken by ascending class index.
fn rank_of(row: ndarray::ArrayView1<f64>, label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Fraction of rows whose label is among the `k` highest logits.
pub fn top_k_accuracy(logits: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let c = logits.ncols();
    if k == 0 || k > c {
        return Err(Error::Invalid(format!("k = {k} outside 1..={c}")));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("top-k accuracy of an empty batch".into()));
    }
    check_labels(labels, c)?;
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| rank_of(*row, l) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class F1 counts: (true positives, predicted, actual).
fn class_counts(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<(usize, usize, usize)> {
    let mut counts = vec![(0, 0, 0); num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[p].1 += 1;
        counts[l].2 += 1;
        if p == l {
            counts[p].0 += 1;
        }
    }
    counts
}

/// Unweighted mean of per-class F1 over all `num_classes` classes. A class
/// with no predictions and no labels scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Invalid("macro-F1 over zero classes".into()));
    }
    check_labels(labels, num_classes)?;
    check_labels(predictions, num_classes)?;
    let total: f64 = class_counts(predictions, labels, num_classes)
        .into_iter()
        .map(|(tp, predicted, actual)| {
            // 2PR/(P+R) simplifies to 2TP/(predicted + actual)
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (predicted + actual) as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Recall of each class in `classes` (None when the class has no samples).
pub fn per_class_recall(predictions: &[usize], labels: &[usize], classes: &[usize]) -> BTreeMap<usize, Option<f64>> {
    classes
        .iter()
        .map(|&c| {
            let actual = labels.iter().filter(|&&l| l == c).count();
            let hit = predictions
                .iter()
                .zip(labels)
                .filter(|(&p, &l)| l == c && p == c)
                .count();
            (c, (actual > 0).then(|| hit as f64 / actual as f64))
        })
        .collect()
}

/// Where a report came from. Carried into every [`MetricsReport`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub ratio: f64,
    pub hidden_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    /// `IMU`, `VIDEO`, `FUSED`, or a zero-shot label such as `IMU*+RGB`.
    pub condition: String,
    pub ratio: f64,
    pub hidden_count: usize,
    pub seed: u64,
    pub top1: f64,
    /// Top-`min(5, num_classes)` accuracy.
    pub top5: f64,
    pub macro_f1: f64,
    pub num_samples: usize,
    pub config_hash: String,
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "dataset",
    "condition",
    "ratio",
    "hidden_count",
    "seed",
    "top1",
    "top5",
    "macro_f1",
];

impl MetricsReport {
    /// One summary CSV row, fields in [`SUMMARY_COLUMNS`] order.
    pub fn summary_row(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.condition.clone(),
            format!("{}", self.ratio),
            self.hidden_count.to_string(),
            self.seed.to_string(),
            format!("{:.6}", self.top1),
            format!("{:.6}", self.top5),
            format!("{:.6}", self.macro_f1),
        ]
    }
}

/// Logits and labels of a full eval-mode pass.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub logits: Array2<f64>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl Predictions {
    pub fn predicted(&self) -> Vec<usize> {
        crate::fusion::ClassLogits {
            values: self.logits.clone(),
        }
        .predictions()
    }

    pub fn report(&self, condition: &str, info: &RunInfo) -> Result<MetricsReport> {
        let c = self.logits.ncols();
        let preds = self.predicted();
        Ok(MetricsReport {
            dataset: info.dataset.clone(),
            condition: condition.to_string(),
            ratio: info.ratio,
            hidden_count: info.hidden_count,
            seed: info.seed,
            top1: top_k_accuracy(&self.logits, &self.labels, 1)?,
            top5: top_k_accuracy(&self.logits, &self.labels, c.min(5))?,
            macro_f1: macro_f1(&preds, &self.labels, c)?,
            num_samples: self.labels.len(),
            config_hash: info.config_hash.clone(),
        })
    }
}

/// Runs `model` over every sample of `test`. Only modalities selected by
/// `condition` are fed; the rest contribute zero features.
pub fn predict(
    model: &FusedModel,
    test: &DatasetIndex,
    builder: &BatchBuilder,
    condition: Condition,
) -> Result<Predictions> {
    if test.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty test set".into()));
    }
    if test.num_classes() != model.num_classes() {
        return Err(Error::Shape(format!(
            "model has {} classes, test set {}",
            model.num_classes(),
            test.num_classes()
        )));
    }
    let mods = model.modalities();
    if !mods.iter().any(|&m| condition.includes(m)) {
        return Err(Error::Invalid(format!(
            "condition {condition} selects none of the model's modalities ({mods:?})"
        )));
    }
    let samples: Vec<&LabeledSample> = test.samples().iter().collect();
    let allow = |s: &LabeledSample, m| s.has(m) && condition.includes(m);
    let mut blocks = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs = assemble_inputs(model, chunk, builder, &allow)?;
        let (logits, _) = model.forward(inputs, chunk.len(), &mut Mode::Eval)?;
        blocks.push(logits.values);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(Predictions {
        logits: concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?,
        labels: samples.iter().map(|s| s.class_id).collect(),
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
    })
}

pub fn evaluate(
    model: &FusedModel,
    test: &DatasetIndex,
    builder: &BatchBuilder,
    condition: Condition,
    info: &RunInfo,
) -> Result<MetricsReport> {
    predict(model, test, builder, condition)?.report(condition.as_str(), info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn top1_on_hand_derived_case() {
        let logits = array![[0.1, 0.9, 0.0], [0.8, 0.1, 0.1]];
        assert_eq!(top_k_accuracy(&logits, &[0, 0], 1).unwrap(), 0.5);
        assert_eq!(top_k_accuracy(&logits, &[0, 0], 3).unwrap(), 1.0);
    }

    #[test]
    fn k_out_of_range_is_an_error() {
        let logits = array![[0.1, 0.9]];
        assert!(top_k_accuracy(&logits, &[0], 0).is_err());
        assert!(top_k_accuracy(&logits, &[0], 3).is_err());
    }

    #[test]
    fn ties_go_to_the_smaller_index() {
        let logits = array![[1.0, 1.0, 1.0]];
        assert_eq!(top_k_accuracy(&logits, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&logits, &[1], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&logits, &[1], 2).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_hand_derived_case() {
        assert!((macro_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[2, 1, 0], &[2, 1, 0], 3).unwrap(), 1.0);
        // class 2 never occurs and is still averaged in
        assert!((macro_f1(&[0, 1], &[0, 1], 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn recall_of_absent_class_is_none() {
        let r = per_class_recall(&[0, 1, 1], &[0, 1, 0], &[0, 2]);
        assert_eq!(r[&0], Some(0.5));
        assert_eq!(r[&2], None);
    }
}
