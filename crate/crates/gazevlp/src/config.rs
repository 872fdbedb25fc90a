//! Run configuration: TOML file, `--set section.key=value` overrides, and a
//! stable hash recorded in every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::RecallMode;
use crate::gaze::GazePipelineConfig;
use crate::loss::SupervisionConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before the LR is scaled.
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub adamw: AdamWConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            epochs: 30,
            batch_size: 16,
            patience: 3,
            factor: 0.5,
            min_lr: 1e-6,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// JSONL corpus on disk; mutually exclusive with `synthetic`.
    pub corpus: Option<PathBuf>,
    /// Inline synthetic corpus spec used when no corpus path is given.
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub per_class: usize,
    pub n_classes: usize,
    pub precision_ks: Vec<usize>,
    pub recall_ks: Vec<usize>,
    /// Clamp K to the index size instead of erroring.
    pub clamp_k: bool,
    pub recall_mode: RecallMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            per_class: 20,
            n_classes: 5,
            precision_ks: vec![1, 5, 10],
            recall_ks: vec![5, 10],
            clamp_k: false,
            recall_mode: RecallMode::HitRate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub supervision: SupervisionConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub gaze: GazePipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            supervision: SupervisionConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            gaze: GazePipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.supervision.validate()?;
        if let Some(spec) = &self.data.synthetic {
            spec.validate()?;
            if self.data.corpus.is_some() {
                return Err(Error::config(
                    "data.corpus and data.synthetic are mutually exclusive",
                ));
            }
        }
        if self.optimizer.batch_size < 2 {
            return Err(Error::config("optimizer.batch_size must be at least 2"));
        }
        if !(self.optimizer.factor > 0.0 && self.optimizer.factor <= 1.0) {
            return Err(Error::config("optimizer.factor must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Load from TOML, apply `--set section.key=value` overrides, validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Value>()
                    .map_err(|e| Error::config(format!("config parse error: {e}")))?
            }
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::config(format!("config field error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable short hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply one `section.key=value` override onto the raw TOML tree. The value
/// is parsed as TOML (so numbers, booleans, arrays, and strings all work);
/// bare words fall back to strings.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_toml_value(raw_value.trim());
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{path}` crosses a non-table")))?;
        node = table
            .entry((*key).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override `{path}` crosses a non-table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    // Wrap in a dummy key so scalar and array literals parse uniformly.
    if let Ok(v) = format!("x = {raw}").parse::<toml::Value>() {
        if let Some(inner) = v.get("x") {
            return inner.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
