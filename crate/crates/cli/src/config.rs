//! Run configuration: a TOML file layered over a preset, then command-line
//! flags layered over the file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mvcl_core::data::{DatasetHeader, SynthConfig};
use mvcl_core::pipeline::{StagePlan, TrainConfig};
use mvcl_core::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// The file schema. Every table rejects unknown keys.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub synth: Option<toml::Table>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
}

/// Values given on the command line; each overrides its file counterpart.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone)]
pub struct Settings {
    pub preset: Preset,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    model: Option<toml::Table>,
    pub train: TrainConfig,
}

/// Marks an error as a usage problem rather than a runtime failure.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Deserializes `base` with the keys of `overlay` replacing its own.
fn layered<T: Serialize + DeserializeOwned>(base: &T, overlay: Option<&toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).with_context(|| format!("serializing {what} defaults"))?;
    if let Some(o) = overlay {
        for (k, v) in o {
            table.insert(k.clone(), v.clone());
        }
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("invalid [{what}] table: {e}")))
}

fn reject_keys(table: Option<&toml::Table>, keys: &[&str], what: &str, why: &str) -> Result<()> {
    if let Some(t) = table {
        if let Some(k) = keys.iter().find(|k| t.contains_key(**k)) {
            return Err(usage(format!("[{what}] key `{k}` is not configurable: {why}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn resolve(self, o: Overrides) -> Result<Settings> {
        let preset = o.preset.or(self.preset).unwrap_or_default();
        let seed = o.seed.or(self.seed).unwrap_or(0);
        reject_keys(self.synth.as_ref(), &["seed"], "synth", "use the top-level seed")?;
        reject_keys(
            self.model.as_ref(),
            &["inputs", "task", "classes"],
            "model",
            "it is read from the dataset",
        )?;
        let mut synth: SynthConfig = layered(&SynthConfig::default(), self.synth.as_ref(), "synth")?;
        synth.seed = seed;
        let train_base = match preset {
            Preset::Desk => TrainConfig::default(),
            Preset::Paper => TrainConfig::paper(),
        };
        let train = layered(&train_base, self.train.as_ref(), "train")?;
        let settings = Settings {
            preset,
            seed,
            out: o.out.or(self.out),
            dataset: o.dataset.or(self.dataset),
            synth,
            model: self.model,
            train,
        };
        StagePlan::standard(&settings.train)
            .validate()
            .map_err(|e| usage(format!("invalid [train] table: {e}")))?;
        // The model depends on dataset shapes; check overrides against the
        // synthetic defaults so bad values fail before any compute.
        settings.model_config(&DatasetHeader {
            n: 0,
            shapes: settings.synth.shapes,
            task: settings.synth.task,
            classes: if settings.synth.task == mvcl_core::model::TaskKind::Classification {
                settings.synth.classes
            } else {
                0
            },
            multi_task: false,
        })?;
        Ok(settings)
    }
}

impl Settings {
    /// Preset model for a dataset, with the `[model]` overrides applied.
    pub fn model_config(&self, header: &DatasetHeader) -> Result<ModelConfig> {
        let base = match self.preset {
            Preset::Desk => ModelConfig::desk(header.shapes, header.task, header.classes),
            Preset::Paper => ModelConfig::paper(header.shapes, header.task, header.classes),
        };
        let cfg: ModelConfig = layered(&base, self.model.as_ref(), "model")?;
        cfg.validate().map_err(|e| usage(format!("invalid [model] table: {e}")))?;
        Ok(cfg)
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan::standard(&self.train)
    }
}
