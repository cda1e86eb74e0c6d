//! On-disk layout of one run:
//!
//! ```text
//! <output_dir>/manifest.json        config copy, hash, environment
//! <output_dir>/config.json
//! <output_dir>/checkpoints/<cell>/<stage>.safetensors
//! <output_dir>/audit/<cell>/<stage>.jsonl
//! <output_dir>/metrics.jsonl        one line per training epoch
//! <output_dir>/metrics.json         every MetricsReport so far
//! <output_dir>/summary.csv
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use fusehar_core::eval::{MetricsReport, SUMMARY_COLUMNS};
use fusehar_core::experiment::{ExperimentConfig, RunObserver};
use fusehar_core::fusion::{save_model, FusedModel};
use fusehar_core::training::TrainingRun;

use crate::options::ConfigError;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub fusehar_version: String,
    pub os: String,
    pub arch: String,
    pub family: String,
    pub cpus: usize,
    pub debug_build: bool,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            fusehar_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            family: std::env::consts::FAMILY.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            debug_build: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: Value,
    pub environment: Environment,
}

/// Claims `cfg.output_dir` for this config. A directory holding a manifest
/// with another config hash is refused, so reruns can only replace results
/// of the same config.
pub fn claim_output_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let root = cfg.output_dir.clone();
    let hash = cfg.config_hash();
    let manifest_path = root.join(MANIFEST);
    if manifest_path.exists() {
        let old: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .with_context(|| format!("reading {}", manifest_path.display()))?;
        if old.config_hash != hash {
            return Err(ConfigError(format!(
                "{} belongs to config {} (this config is {hash}); choose another --output",
                root.display(),
                old.config_hash
            ))
            .into());
        }
    }
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: hash,
        config: cfg.to_value(),
        environment: Environment::current(),
    };
    write_json(&manifest_path, &manifest)?;
    write_json(&root.join("config.json"), &cfg.to_value())?;
    Ok(root)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in reports {
        w.write_record(r.summary_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes artifacts as the experiment harness hands them over, so a failed
/// run keeps everything produced before the failure.
pub struct ArtifactWriter {
    root: PathBuf,
    config_hash: String,
    reports: Vec<MetricsReport>,
    epochs: BufWriter<File>,
}

impl ArtifactWriter {
    pub fn new(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let epochs = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(root.join("metrics.jsonl"))?;
        Ok(Self {
            root: root.to_path_buf(),
            config_hash: cfg.config_hash(),
            reports: Vec::new(),
            epochs: BufWriter::new(epochs),
        })
    }

    pub fn reports(&self) -> &[MetricsReport] {
        &self.reports
    }

    pub fn checkpoint_path(&self, cell: &str, stage: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(cell)
            .join(format!("{stage}.safetensors"))
    }

    fn flush_reports(&self) -> Result<()> {
        write_json(&self.root.join("metrics.json"), &self.reports)?;
        write_summary(&self.root.join(SUMMARY), &self.reports)
    }

    fn on_stage(&mut self, cell: &str, stage: &str, model: &FusedModel, run: &TrainingRun) -> Result<()> {
        let path = self.checkpoint_path(cell, stage);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let extra = json!({
            "cell": cell,
            "stage": stage,
            "config_hash": self.config_hash,
            "best_epoch": run.best_epoch,
            "stopped_early": run.stopped_early,
            "num_train": run.num_train,
            "num_val": run.num_val,
        });
        save_model(&path, model, extra)?;
        write_jsonl(
            &self.root.join("audit").join(cell).join(format!("{stage}.jsonl")),
            &run.audit,
        )?;
        for rec in &run.history {
            let mut line = json!({"cell": cell, "stage_name": stage});
            if let (Value::Object(line), Value::Object(r)) = (&mut line, serde_json::to_value(rec)?) {
                line.extend(r);
            }
            serde_json::to_writer(&mut self.epochs, &line)?;
            self.epochs.write_all(b"\n")?;
        }
        self.epochs.flush()?;
        Ok(())
    }
}

fn core_err(e: anyhow::Error) -> fusehar_core::Error {
    fusehar_core::Error::Invalid(format!("writing artifacts: {e:#}"))
}

impl RunObserver for ArtifactWriter {
    fn stage_finished(
        &mut self,
        cell: &str,
        stage: &str,
        model: &FusedModel,
        run: &TrainingRun,
    ) -> fusehar_core::Result<()> {
        log::info!(
            "{cell}/{stage}: {} epochs, best {:?}",
            run.history.len(),
            run.best_epoch
        );
        self.on_stage(cell, stage, model, run).map_err(core_err)
    }

    fn report(&mut self, report: &MetricsReport) -> fusehar_core::Result<()> {
        self.reports.push(report.clone());
        self.flush_reports().map_err(core_err)
    }
}

/// One parsed `summary.csv` and where it came from.
#[derive(Debug, Clone)]
pub struct Summary {
    pub path: PathBuf,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub condition: String,
    pub ratio: f64,
    pub hidden_count: usize,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub macro_f1: f64,
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != SUMMARY_COLUMNS {
        anyhow::bail!("{}: columns {headers:?} are not {SUMMARY_COLUMNS:?}", path.display());
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Summary {
        path: path.to_path_buf(),
        rows,
    })
}

/// Every `summary.csv` at or below each input (a file or a directory), in
/// sorted path order per input.
pub fn find_summaries(inputs: &[PathBuf]) -> Result<Vec<Summary>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == SUMMARY) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_file() {
            paths.push(input.clone());
        } else if input.is_dir() {
            walk(input, &mut paths)?;
        } else {
            return Err(ConfigError(format!("{} does not exist", input.display())).into());
        }
    }
    paths.iter().map(|p| read_summary(p)).collect()
}
