use std::fs;
use std::path::{Path, PathBuf};

use hetgt::graph::{generate_synthetic, load_dataset, HeteroGraph, SyntheticSpec};
use hetgt::model::ModelSpec;
use hetgt::training::TrainConfig;
use hetgt::Precision;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// One experiment. Exactly one of `dataset` and `synthetic` is set; a
/// relative `dataset` path is resolved against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_runs() -> usize {
    10
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub depth: Option<usize>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
}

/// Parses a JSON file, reporting syntax and schema errors as
/// `path:line:column: message`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Failure> {
        let mut config: Self = read_json(path)?;
        if let Some(d) = &config.dataset {
            if d.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                config.dataset = Some(base.join(d));
            }
        }
        if let Some(s) = overrides.seed {
            config.train.seed = s;
        }
        if let Some(r) = overrides.runs {
            config.n_runs = r;
        }
        if let Some(d) = overrides.depth {
            config.model.depth = d;
        }
        if let Some(o) = &overrides.out {
            config.out = o.clone();
        }
        if let Some(p) = overrides.precision {
            config.train.precision = p;
        }
        config
            .validate()
            .map_err(|m| Failure::config(format!("{}: {m}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return Err("set either `dataset` or `synthetic`, not both".into()),
            (None, None) => return Err("one of `dataset` or `synthetic` is required".into()),
            _ => {}
        }
        if self.n_runs < 5 {
            return Err(format!("n_runs must be at least 5, got {}", self.n_runs));
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if let Some(s) = &self.synthetic {
            s.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<HeteroGraph, Failure> {
        match (&self.dataset, &self.synthetic) {
            (Some(dir), _) => Ok(load_dataset(dir)?),
            (_, Some(spec)) => Ok(generate_synthetic(spec)?),
            (None, None) => unreachable!("validated"),
        }
    }
}
