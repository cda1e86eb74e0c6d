//! Config-driven composition of loading, two-stage training and evaluation:
//! the baseline run, the data-ratio sweep and the zero-shot experiment.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, merge, DataConfig, EncoderSpec, ExperimentConfig, ExperimentKind, MaskedModality, RatioSweepConfig,
    ZeroShotConfig,
};

use crate::data::{
    mask_classes, subset_by_ratio, BatchBuilder, Dataset, DatasetIndex, DatasetRegistry, Modality, PreprocessCache,
    SourceRequest,
};
use crate::encoder::{load_pretrained_video_weights, Encoder, EncoderRegistry, VideoEncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, per_class_recall, predict, MetricsReport, RunInfo};
use crate::fusion::{EncoderPart, FusedModel};
use crate::training::{derive_seed, train_stage1, train_stage2, Condition, TrainHyperparams, TrainingRun};

/// Environment variable consulted when the config names no data root.
pub const DATA_ROOT_ENV: &str = "FUSEHAR_DATA_ROOT";

/// Receives artifacts as the harness produces them.
pub trait RunObserver {
    /// `stage` is one of `stage1_imu`, `stage1_video`, `stage2_fused`.
    fn stage_finished(&mut self, _cell: &str, _stage: &str, _model: &FusedModel, _run: &TrainingRun) -> Result<()> {
        Ok(())
    }

    fn report(&mut self, _report: &MetricsReport) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

/// Loads the configured dataset and a batch builder for it. The seed only
/// matters for generated data.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, BatchBuilder)> {
    let root = cfg
        .data
        .root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
    let request = SourceRequest {
        root,
        options: cfg.data.options.clone(),
        seed: derive_seed(seed, "data"),
    };
    let dataset = DatasetRegistry::default().load(cfg.dataset.source_name(), &request)?;
    let mut builder = BatchBuilder::new(dataset.preprocessing.clone()).with_memory(cfg.data.memory_budget_mb << 20);
    if let Some(dir) = &cfg.data.cache_dir {
        builder = builder.with_cache(PreprocessCache::new(dir, &dataset.name, &dataset.preprocessing));
    }
    Ok((dataset, builder))
}

fn stage_hyper(h: &TrainHyperparams, seed: u64, purpose: &str) -> TrainHyperparams {
    TrainHyperparams {
        seed: derive_seed(seed, &format!("{purpose}:{}", h.seed)),
        ..h.clone()
    }
}

fn build(registry: &EncoderRegistry, spec: &EncoderSpec) -> Result<Box<dyn Encoder>> {
    registry.build(&spec.kind, &spec.config)
}

/// Fresh (or pre-trained, for a video checkpoint) encoder ready for stage 1.
fn initial_part(cfg: &ExperimentConfig, registry: &EncoderRegistry, m: Modality, seed: u64) -> Result<EncoderPart> {
    let spec = match m {
        Modality::Imu => &cfg.imu_encoder,
        Modality::Video => &cfg.video_encoder,
    };
    let encoder = build(registry, spec)?;
    let checkpoint = match m {
        Modality::Video => serde_json::from_value::<VideoEncoderConfig>(encoder.config())
            .ok()
            .and_then(|c| c.checkpoint.clone().map(|p| (p, c))),
        Modality::Imu => None,
    };
    let params = match checkpoint {
        // pre-trained backbones keep their frozen groups frozen in stage 1 too
        Some((path, vcfg)) => load_pretrained_video_weights(&path, &vcfg)?,
        None => encoder.init(derive_seed(seed, &format!("init:{m}")))?,
    };
    Ok(EncoderPart { encoder, params })
}

fn stage_name(m: Modality) -> &'static str {
    match m {
        Modality::Imu => "stage1_imu",
        Modality::Video => "stage1_video",
    }
}

/// Stage-1 classifier for one modality.
pub fn pretrain(
    cfg: &ExperimentConfig,
    registry: &EncoderRegistry,
    m: Modality,
    train: &DatasetIndex,
    builder: &BatchBuilder,
    seed: u64,
) -> Result<(FusedModel, TrainingRun)> {
    let hyper = match m {
        Modality::Imu => &cfg.stage1_imu,
        Modality::Video => &cfg.stage1_video,
    };
    let part = initial_part(cfg, registry, m, seed)?;
    train_stage1(
        part,
        train,
        builder,
        &stage_hyper(hyper, seed, stage_name(m)),
        cfg.head_hidden_dim,
    )
}

/// Stage 2 from two stage-1 classifiers, whose encoders are copied.
pub fn finetune(
    cfg: &ExperimentConfig,
    registry: &EncoderRegistry,
    imu: &FusedModel,
    video: &FusedModel,
    train: &DatasetIndex,
    builder: &BatchBuilder,
    seed: u64,
) -> Result<(FusedModel, TrainingRun)> {
    let copy = |model: &FusedModel, spec: &EncoderSpec| -> Result<EncoderPart> {
        Ok(EncoderPart {
            encoder: build(registry, spec)?,
            params: model.parts[0].params.clone(),
        })
    };
    let imu = copy(imu, &cfg.imu_encoder)?;
    let video = copy(video, &cfg.video_encoder)?;
    let groups = video.encoder.finetune_groups();
    train_stage2(
        imu,
        video,
        train,
        builder,
        &stage_hyper(&cfg.stage2, seed, "stage2_fused"),
        &groups,
        cfg.head_hidden_dim,
    )
}

/// Models produced for one condition: the stage-1 classifiers it needs and,
/// for `FUSED`, the fine-tuned fusion model.
#[derive(Debug, Default)]
pub struct TrainedModels {
    pub imu: Option<FusedModel>,
    pub video: Option<FusedModel>,
    pub fused: Option<FusedModel>,
}

impl TrainedModels {
    /// The model a condition is scored with.
    pub fn for_condition(&self, condition: Condition) -> Option<&FusedModel> {
        match condition {
            Condition::Imu => self.imu.as_ref(),
            Condition::Video => self.video.as_ref(),
            Condition::Fused => self.fused.as_ref(),
        }
    }
}

pub fn train_models(
    cfg: &ExperimentConfig,
    train: &DatasetIndex,
    builder: &BatchBuilder,
    seed: u64,
    cell: &str,
    observer: &mut dyn RunObserver,
) -> Result<TrainedModels> {
    let registry = EncoderRegistry::default();
    let mut out = TrainedModels::default();
    for m in Modality::ALL {
        if cfg.modality_condition == Condition::Fused || cfg.modality_condition == Condition::single(m) {
            let (model, run) = pretrain(cfg, &registry, m, train, builder, seed)?;
            observer.stage_finished(cell, stage_name(m), &model, &run)?;
            match m {
                Modality::Imu => out.imu = Some(model),
                Modality::Video => out.video = Some(model),
            }
        }
    }
    if let (Condition::Fused, Some(imu), Some(video)) = (cfg.modality_condition, &out.imu, &out.video) {
        let (model, run) = finetune(cfg, &registry, imu, video, train, builder, seed)?;
        observer.stage_finished(cell, "stage2_fused", &model, &run)?;
        out.fused = Some(model);
    }
    Ok(out)
}

fn info(cfg: &ExperimentConfig, seed: u64, ratio: f64, hidden_count: usize) -> RunInfo {
    RunInfo {
        dataset: cfg.dataset.as_str().to_string(),
        config_hash: cfg.config_hash(),
        seed,
        ratio,
        hidden_count,
    }
}

#[derive(Debug)]
pub struct BaselineOutcome {
    /// The configured condition's report.
    pub report: MetricsReport,
    /// Single-modality reports of the stage-1 classifiers of a `FUSED` run.
    pub stage1_reports: Vec<MetricsReport>,
    pub models: TrainedModels,
}

/// Two-stage training on the full training split, scored on the test split.
pub fn run_baseline(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<BaselineOutcome> {
    let (dataset, builder) = load_dataset(cfg, cfg.seed)?;
    let models = train_models(cfg, &dataset.train, &builder, cfg.seed, "baseline", observer)?;
    let info = info(cfg, cfg.seed, 1.0, 0);
    let model = models
        .for_condition(cfg.modality_condition)
        .expect("trained for its own condition");
    let report = evaluate(model, &dataset.test, &builder, cfg.modality_condition, &info)?;
    observer.report(&report)?;
    let mut stage1_reports = Vec::new();
    if cfg.modality_condition == Condition::Fused {
        for c in [Condition::Imu, Condition::Video] {
            let m = models.for_condition(c).expect("stage-1 model");
            stage1_reports.push(evaluate(m, &dataset.test, &builder, c, &info)?);
        }
    }
    Ok(BaselineOutcome {
        report,
        stage1_reports,
        models,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub ratio: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<CellFailure>,
}

/// For every (seed, ratio): stratified subset of the training split, full
/// two-stage training, evaluation on the untouched test split. A `FUSED`
/// sweep also scores its stage-1 classifiers, one report per condition.
/// A failing cell is recorded and the sweep moves on.
pub fn run_data_ratio_sweep(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<SweepOutcome> {
    let mut out = SweepOutcome::default();
    for &seed in &cfg.ratio_sweep.seeds {
        let (dataset, builder) = load_dataset(cfg, seed)?;
        for &ratio in &cfg.ratio_sweep.ratios {
            let cell = format!("ratio{ratio}_seed{seed}");
            let result = (|| -> Result<Vec<MetricsReport>> {
                let train = subset_by_ratio(&dataset.train, ratio, derive_seed(seed, "subset"))?;
                let models = train_models(cfg, &train, &builder, seed, &cell, observer)?;
                let info = info(cfg, seed, ratio, 0);
                let mut reports = Vec::new();
                for c in [Condition::Imu, Condition::Video, Condition::Fused] {
                    if let Some(model) = models.for_condition(c) {
                        reports.push(evaluate(model, &dataset.test, &builder, c, &info)?);
                    }
                }
                Ok(reports)
            })();
            match result {
                Ok(reports) => {
                    for r in &reports {
                        observer.report(r)?;
                    }
                    out.reports.extend(reports);
                }
                Err(e) => {
                    let mut error = e.to_string();
                    let mut source = std::error::Error::source(&e);
                    while let Some(s) = source {
                        error.push_str(&format!(": {s}"));
                        source = s.source();
                    }
                    log::error!("sweep cell {cell} failed: {error}");
                    out.failures.push(CellFailure { ratio, seed, error });
                }
            }
        }
    }
    Ok(out)
}

/// `count` classes drawn uniformly without replacement from a stream seeded
/// by `seed`. Larger counts extend smaller ones.
pub fn select_hidden_classes(num_classes: usize, count: usize, seed: u64) -> Result<BTreeSet<usize>> {
    if count >= num_classes {
        return Err(Error::Invalid(format!(
            "cannot hide {count} of {num_classes} classes; at least one must stay visible"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "hidden-classes")));
    Ok(order[..count].iter().copied().collect())
}

/// Label of the masked single-modality condition and of the fused one.
pub fn zero_shot_labels(masked: Modality) -> (&'static str, &'static str) {
    match masked {
        Modality::Imu => ("IMU-only", "IMU*+RGB"),
        Modality::Video => ("RGB-only", "RGB*+IMU"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotEntry {
    pub masked_modality: Modality,
    pub hidden_count: usize,
    pub hidden_classes: Vec<usize>,
    /// One report per condition label.
    pub reports: Vec<MetricsReport>,
    /// Condition label → hidden class → recall on the test split.
    pub hidden_recall: BTreeMap<String, BTreeMap<usize, Option<f64>>>,
    /// Audit records pairing a hidden class with the masked modality, over
    /// both stages. Zero unless the masking contract is broken.
    pub leaked_records: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub masked_modality: MaskedModality,
    pub entries: Vec<ZeroShotEntry>,
}

impl ZeroShotReport {
    pub fn reports(&self) -> impl Iterator<Item = &MetricsReport> {
        self.entries.iter().flat_map(|e| e.reports.iter())
    }
}

fn leaks(run: &TrainingRun, hidden: &BTreeSet<usize>, masked: Modality) -> usize {
    run.audit
        .iter()
        .filter(|r| r.modality == masked && hidden.contains(&r.class_id))
        .count()
}

/// For each hidden count: hide the drawn classes from the masked modality
/// before stage 1, keep them hidden through stage 2, and score the masked
/// single-modality classifier and the fusion model on the full test split.
pub fn run_zero_shot_experiment(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<ZeroShotReport> {
    let registry = EncoderRegistry::default();
    let seed = cfg.seed;
    let (dataset, builder) = load_dataset(cfg, seed)?;
    let c = dataset.train.num_classes();
    for &count in &cfg.zero_shot.hidden_counts {
        if count >= c {
            return Err(Error::Invalid(format!(
                "hidden count {count} must be below the {c} classes of {}",
                dataset.name
            )));
        }
    }
    let mut entries = Vec::new();
    for masked in cfg.zero_shot.masked_modality.modalities() {
        let other = if masked == Modality::Imu {
            Modality::Video
        } else {
            Modality::Imu
        };
        let (single_label, fused_label) = zero_shot_labels(masked);
        // the other modality never loses data, so one stage-1 run serves
        // every hidden count
        let (other_model, other_run) = pretrain(cfg, &registry, other, &dataset.train, &builder, seed)?;
        for &count in &cfg.zero_shot.hidden_counts {
            let cell = format!("mask{masked}_hidden{count}");
            observer.stage_finished(&cell, stage_name(other), &other_model, &other_run)?;
            let hidden = select_hidden_classes(c, count, seed)?;
            let (train, _) = mask_classes(&dataset.train, masked, &hidden)?;
            let (masked_model, masked_run) = pretrain(cfg, &registry, masked, &train, &builder, seed)?;
            observer.stage_finished(&cell, stage_name(masked), &masked_model, &masked_run)?;
            let (imu, video) = match masked {
                Modality::Imu => (&masked_model, &other_model),
                Modality::Video => (&other_model, &masked_model),
            };
            let (fused, fused_run) = finetune(cfg, &registry, imu, video, &train, &builder, seed)?;
            observer.stage_finished(&cell, "stage2_fused", &fused, &fused_run)?;

            let info = info(cfg, seed, 1.0, count);
            let hidden_list: Vec<usize> = hidden.iter().copied().collect();
            let mut reports = Vec::new();
            let mut hidden_recall = BTreeMap::new();
            for (label, model, condition) in [
                (single_label, &masked_model, Condition::single(masked)),
                (fused_label, &fused, Condition::Fused),
            ] {
                let preds = predict(model, &dataset.test, &builder, condition)?;
                let report = preds.report(label, &info)?;
                observer.report(&report)?;
                hidden_recall.insert(
                    label.to_string(),
                    per_class_recall(&preds.predicted(), &preds.labels, &hidden_list),
                );
                reports.push(report);
            }
            entries.push(ZeroShotEntry {
                masked_modality: masked,
                hidden_count: count,
                hidden_classes: hidden_list,
                reports,
                hidden_recall,
                leaked_records: leaks(&masked_run, &hidden, masked) + leaks(&fused_run, &hidden, masked),
            });
        }
    }
    Ok(ZeroShotReport {
        masked_modality: cfg.zero_shot.masked_modality,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_classes_are_nested_and_bounded() {
        let one = select_hidden_classes(16, 1, 3).unwrap();
        let three = select_hidden_classes(16, 3, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(one.is_subset(&three));
        assert!(select_hidden_classes(16, 0, 3).unwrap().is_empty());
        assert!(select_hidden_classes(16, 16, 3).is_err());
    }
}
