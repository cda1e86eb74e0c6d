use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, AdamState};
use super::{derive_seed, TrainHyperparams};
use crate::data::{BatchBuilder, DatasetIndex, LabeledSample, Modality};
use crate::error::{Error, Result};
use crate::fusion::{
    cross_entropy_loss, cross_entropy_with_grad, EncoderPart, FusedModel, MlpHead, MlpHeadConfig, PartInput,
};
use crate::nn::Mode;
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

/// One (sample, modality) pair fed to an encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stage: u8,
    pub epoch: usize,
    pub sample_id: String,
    pub class_id: usize,
    pub modality: Modality,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingRun {
    pub history: Vec<EpochRecord>,
    pub audit: Vec<AuditRecord>,
    /// Epoch whose parameters were kept, when validation drove selection.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub num_train: usize,
    pub num_val: usize,
}

impl TrainingRun {
    pub fn extend(&mut self, other: TrainingRun) {
        self.history.extend(other.history);
        self.audit.extend(other.audit);
    }
}

/// Builds the per-modality inputs for `samples`. A row feeds encoder `m`
/// only when `allow(sample, m)` holds; the other rows get zero features.
pub fn assemble_inputs(
    model: &FusedModel,
    samples: &[&LabeledSample],
    builder: &BatchBuilder,
    allow: &dyn Fn(&LabeledSample, Modality) -> bool,
) -> Result<Vec<PartInput>> {
    let mut inputs = Vec::with_capacity(model.parts.len());
    for m in model.modalities() {
        let rows: Vec<usize> = (0..samples.len()).filter(|&i| allow(samples[i], m)).collect();
        if rows.is_empty() {
            continue;
        }
        let selected: Vec<&LabeledSample> = rows.iter().map(|&i| samples[i]).collect();
        inputs.push(PartInput {
            modality: m,
            x: builder.batch(m, &selected)?,
            rows,
        });
    }
    Ok(inputs)
}

fn eligible(s: &LabeledSample, m: Modality) -> bool {
    s.eligible(m)
}

/// Pre-trains one encoder with its own head on the samples that may supply
/// its modality. Trainable groups are taken from `part.params` as given.
pub fn train_stage1(
    part: EncoderPart,
    train: &DatasetIndex,
    builder: &BatchBuilder,
    hyper: &TrainHyperparams,
    hidden_dim: usize,
) -> Result<(FusedModel, TrainingRun)> {
    hyper.validate()?;
    let m = part.encoder.modality();
    let usable: Vec<usize> = (0..train.len()).filter(|&i| train.samples()[i].eligible(m)).collect();
    if usable.is_empty() {
        return Err(Error::EmptyEligibleSet(format!("stage-1 {m} training")));
    }
    let head = MlpHead::new(MlpHeadConfig {
        in_dim: part.encoder.feature_dim(),
        hidden_dim,
        num_classes: train.num_classes(),
    })?;
    let head_params = head.init(derive_seed(hyper.seed, "head"));
    let mut model = FusedModel {
        parts: vec![part],
        head,
        head_params,
    };
    let run = fit(&mut model, train, usable, builder, hyper, 1)?;
    Ok((model, run))
}

/// Fine-tunes both encoders under a fresh fusion head: every IMU group and
/// the named video groups train, the rest of the video encoder stays frozen.
/// A sample contributes zero features for any modality its mask excludes.
pub fn train_stage2(
    mut imu: EncoderPart,
    mut video: EncoderPart,
    train: &DatasetIndex,
    builder: &BatchBuilder,
    hyper: &TrainHyperparams,
    video_trainable_groups: &[String],
    hidden_dim: usize,
) -> Result<(FusedModel, TrainingRun)> {
    hyper.validate()?;
    if imu.encoder.modality() != Modality::Imu || video.encoder.modality() != Modality::Video {
        return Err(Error::Invalid(
            "stage 2 expects an IMU encoder and a video encoder".into(),
        ));
    }
    imu.params.set_all_trainable(true);
    video.params.set_trainable(video_trainable_groups)?;
    let usable: Vec<usize> = (0..train.len())
        .filter(|&i| Modality::ALL.iter().any(|&m| train.samples()[i].eligible(m)))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyEligibleSet("stage-2 training".into()));
    }
    let head = MlpHead::new(MlpHeadConfig {
        in_dim: imu.encoder.feature_dim() + video.encoder.feature_dim(),
        hidden_dim,
        num_classes: train.num_classes(),
    })?;
    let head_params = head.init(derive_seed(hyper.seed, "head"));
    let mut model = FusedModel {
        parts: vec![imu, video],
        head,
        head_params,
    };
    let run = fit(&mut model, train, usable, builder, hyper, 2)?;
    Ok((model, run))
}

/// Per-class carve-out of `round(fraction · n_c)` samples, always leaving at
/// least one training sample per class.
fn stratified_split(train: &DatasetIndex, usable: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in usable {
        by_class.entry(train.samples()[i].class_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        fit.extend_from_slice(&idx[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

struct Snapshot {
    head: ModelParams,
    parts: Vec<ModelParams>,
}

impl Snapshot {
    fn take(model: &FusedModel) -> Self {
        Self {
            head: model.head_params.clone(),
            parts: model.parts.iter().map(|p| p.params.clone()).collect(),
        }
    }

    fn restore(self, model: &mut FusedModel) {
        model.head_params = self.head;
        for (part, p) in model.parts.iter_mut().zip(self.parts) {
            part.params = p;
        }
    }
}

struct PassStats {
    loss: f64,
    top1: f64,
}

fn record(
    audit: &mut Vec<AuditRecord>,
    stage: u8,
    epoch: usize,
    phase: Phase,
    batch: &[&LabeledSample],
    inputs: &[PartInput],
) {
    for input in inputs {
        for &r in &input.rows {
            audit.push(AuditRecord {
                stage,
                epoch,
                sample_id: batch[r].sample_id.clone(),
                class_id: batch[r].class_id,
                modality: input.modality,
                phase,
            });
        }
    }
}

fn diverged(e: Error, epoch: usize, loss: f64) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch, loss },
        other => other,
    }
}

fn fit(
    model: &mut FusedModel,
    train: &DatasetIndex,
    usable: Vec<usize>,
    builder: &BatchBuilder,
    hyper: &TrainHyperparams,
    stage: u8,
) -> Result<TrainingRun> {
    let (mut fit_idx, val_idx) = stratified_split(train, &usable, hyper.val_fraction, derive_seed(hyper.seed, "split"));
    let mut run = TrainingRun {
        num_train: fit_idx.len(),
        num_val: val_idx.len(),
        ..Default::default()
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "dropout"));
    let mut head_state = AdamState::new();
    let mut part_states = vec![AdamState::new(); model.parts.len()];
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut since_best = 0;

    for epoch in 1..=hyper.max_epochs {
        fit_idx.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in fit_idx.chunks(hyper.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train.samples()[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
            let inputs = assemble_inputs(model, &batch, builder, &eligible)?;
            record(&mut run.audit, stage, epoch, Phase::Train, &batch, &inputs);
            let fed: Vec<Modality> = inputs.iter().map(|i| i.modality).collect();
            let (logits, tape) = model
                .forward(inputs, batch.len(), &mut Mode::Train(&mut dropout_rng))
                .map_err(|e| diverged(e, epoch, f64::NAN))?;
            let (loss, dlogits) = cross_entropy_with_grad(&logits.values, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += count_correct(&logits.predictions(), &labels);
            let (head_grads, part_grads) = model.backward(tape, dlogits)?;
            optimizer_step(&mut model.head_params, &head_grads, &mut head_state, hyper)
                .map_err(|e| diverged(e, epoch, loss))?;
            for ((part, grads), state) in model.parts.iter_mut().zip(part_grads).zip(&mut part_states) {
                // an encoder that saw no rows in this batch has no gradient
                // at all, so it takes no step
                if fed.contains(&part.encoder.modality()) {
                    optimizer_step(&mut part.params, &grads, state, hyper).map_err(|e| diverged(e, epoch, loss))?;
                }
            }
        }
        let n = fit_idx.len() as f64;
        let mut rec = EpochRecord {
            stage,
            epoch,
            train_loss: loss_sum / n,
            train_top1: correct as f64 / n,
            val_loss: None,
            val_top1: None,
        };
        if !val_idx.is_empty() {
            let stats = evaluate_pass(
                model,
                train,
                &val_idx,
                builder,
                hyper.batch_size,
                stage,
                epoch,
                &mut run.audit,
            )
            .map_err(|e| diverged(e, epoch, f64::NAN))?;
            rec.val_loss = Some(stats.loss);
            rec.val_top1 = Some(stats.top1);
            if best.as_ref().is_none_or(|(b, _, _)| stats.loss < *b) {
                best = Some((stats.loss, epoch, Snapshot::take(model)));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::info!(
            "stage {stage} epoch {epoch}: train loss {:.4} top1 {:.3}{}",
            rec.train_loss,
            rec.train_top1,
            rec.val_loss
                .map(|l| format!(", val loss {l:.4} top1 {:.3}", rec.val_top1.unwrap_or(0.0)))
                .unwrap_or_default()
        );
        run.history.push(rec);
        if hyper.patience.is_some_and(|p| since_best >= p) {
            run.stopped_early = true;
            break;
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        snapshot.restore(model);
        run.best_epoch = Some(epoch);
    }
    Ok(run)
}

fn count_correct(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_pass(
    model: &FusedModel,
    train: &DatasetIndex,
    idx: &[usize],
    builder: &BatchBuilder,
    batch_size: usize,
    stage: u8,
    epoch: usize,
    audit: &mut Vec<AuditRecord>,
) -> Result<PassStats> {
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train.samples()[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
        let inputs = assemble_inputs(model, &batch, builder, &eligible)?;
        record(audit, stage, epoch, Phase::Val, &batch, &inputs);
        let (logits, _) = model.forward(inputs, batch.len(), &mut Mode::Eval)?;
        let loss = cross_entropy_loss(&logits.values, &labels)?;
        loss_sum += loss * batch.len() as f64;
        correct += count_correct(&logits.predictions(), &labels);
    }
    let n = idx.len() as f64;
    Ok(PassStats {
        loss: loss_sum / n,
        top1: correct as f64 / n,
    })
}
