//! Config file handling. The file is TOML with one section per component;
//! every key is optional and command-line flags take precedence.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use cised::experiment::RunConfig;
use cised::metrics::MetricsConfig;
use cised::model::ModelConfig;
use cised::synthdata::{GeneratorConfig, SplitSizes};
use cised::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub generator: GeneratorConfig,
    pub sizes: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            metrics: self.metrics,
        }
    }
}

/// Prints a value as TOML under a header so logs carry the full setup.
pub fn print_resolved<T: Serialize>(what: &str, value: &T) {
    println!("# resolved {what} config");
    match toml::to_string(value) {
        Ok(text) => println!("{}", text.trim_end()),
        Err(e) => println!("# (not printable: {e})"),
    }
    println!();
}
