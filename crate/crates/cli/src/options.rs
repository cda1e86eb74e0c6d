use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde_json::{json, Value};

use fusehar_core::experiment::{apply_override, ExperimentConfig, ExperimentKind};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Flags shared by every verb that runs or scores an experiment.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON experiment config; unspecified fields fall back to the dataset preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Replaces the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Replaces the config's output_dir.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,

    /// Dotted-path assignment, e.g. `stage2.max_epochs=5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// A problem with the user's input rather than with the run itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// 1 for config problems anywhere in the chain, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let config = err.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(
                c.downcast_ref::<fusehar_core::Error>(),
                Some(fusehar_core::Error::Config(_) | fusehar_core::Error::UnknownStrategy { .. })
            )
    });
    if config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

impl RunArgs {
    /// The raw config document with every command-line override applied.
    pub fn document(&self, experiment: Option<ExperimentKind>) -> Result<Value, ConfigError> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| ConfigError(format!("{} is not valid JSON: {e}", path.display())))?
            }
            None => json!({}),
        };
        if !doc.is_object() {
            return Err(ConfigError("config must be a JSON object".into()));
        }
        for assignment in &self.overrides {
            apply_override(&mut doc, assignment).map_err(|e| ConfigError(format!("--override {assignment}: {e}")))?;
        }
        if let Some(seed) = self.seed {
            doc["seed"] = json!(seed);
        }
        if let Some(out) = &self.output {
            doc["output_dir"] = json!(out);
        }
        if let Some(kind) = experiment {
            doc["experiment"] = serde_json::to_value(kind).expect("serialisable");
        }
        Ok(doc)
    }

    pub fn load(&self, experiment: Option<ExperimentKind>) -> Result<ExperimentConfig, ConfigError> {
        let doc = self.document(experiment)?;
        ExperimentConfig::from_value(&doc).map_err(|e| ConfigError(e.to_string()))
    }
}
