use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fusehar_core::encoder::EncoderRegistry;
use fusehar_core::eval::{evaluate, MetricsReport, RunInfo};
use fusehar_core::experiment::{
    load_dataset, run_baseline, run_data_ratio_sweep, run_zero_shot_experiment, ExperimentKind,
};
use fusehar_core::fusion::load_model;
use fusehar_core::training::Condition;

use crate::artifacts::{claim_output_dir, write_json, write_summary, ArtifactWriter, SUMMARY};
use crate::options::RunArgs;

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
}

/// Runs one experiment kind with every artifact written under the
/// configured output directory. Failed sweep cells are recorded in
/// `failures.json` and turn the whole run into an error once the remaining
/// cells have finished.
pub fn run_experiment(args: &RunArgs, kind: ExperimentKind, command: &str) -> Result<RunSummary> {
    let cfg = args.load(Some(kind))?;
    let root = claim_output_dir(&cfg, command)?;
    log::info!("{command}: writing to {}", root.display());
    let mut writer = ArtifactWriter::new(&root, &cfg)?;
    match kind {
        ExperimentKind::Baseline => {
            let out = run_baseline(&cfg, &mut writer)?;
            write_json(&root.join("stage1_metrics.json"), &out.stage1_reports)?;
        }
        ExperimentKind::RatioSweep => {
            let out = run_data_ratio_sweep(&cfg, &mut writer)?;
            write_json(&root.join("failures.json"), &out.failures)?;
            if !out.failures.is_empty() {
                bail!(
                    "{} of {} sweep cells failed (see {})",
                    out.failures.len(),
                    cfg.ratio_sweep.ratios.len() * cfg.ratio_sweep.seeds.len(),
                    root.join("failures.json").display()
                );
            }
        }
        ExperimentKind::ZeroShot => {
            let report = run_zero_shot_experiment(&cfg, &mut writer)?;
            write_json(&root.join("zero_shot.json"), &report)?;
            let leaked: usize = report.entries.iter().map(|e| e.leaked_records).sum();
            if leaked > 0 {
                bail!("{leaked} audit records pair a hidden class with the masked modality");
            }
        }
    }
    Ok(RunSummary {
        output_dir: root,
        reports: writer.reports().to_vec(),
    })
}

/// Scores a checkpoint on the configured dataset's test split and writes
/// `evaluation/metrics.json` and `evaluation/summary.csv` under the output
/// directory. Without a condition, a two-encoder model is scored `FUSED`
/// and a single-encoder one on its own modality.
pub fn evaluate_checkpoint(args: &RunArgs, checkpoint: &Path, condition: Option<Condition>) -> Result<RunSummary> {
    let cfg = args.load(None)?;
    let (model, _) = load_model(checkpoint, &EncoderRegistry::default())
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let condition = match condition {
        Some(c) => c,
        None if model.parts.len() > 1 => Condition::Fused,
        None => Condition::single(model.modalities()[0]),
    };
    let (dataset, builder) = load_dataset(&cfg, cfg.seed)?;
    let info = RunInfo {
        dataset: cfg.dataset.as_str().to_string(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        ratio: 1.0,
        hidden_count: 0,
    };
    let report = evaluate(&model, &dataset.test, &builder, condition, &info)?;
    let out = cfg.output_dir.join("evaluation");
    write_json(&out.join("metrics.json"), &[&report])?;
    write_summary(&out.join(SUMMARY), std::slice::from_ref(&report))?;
    Ok(RunSummary {
        output_dir: out,
        reports: vec![report],
    })
}
