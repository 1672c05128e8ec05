//! Experiment configuration: one TOML document with a section per module.
//!
//! Values are layered as built-in defaults, then the config file, then
//! `UDADET_<SECTION>__<KEY>` environment variables, then `section.key=value`
//! command-line assignments. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::codec::DecodeParams;
use crate::data::{AugmentConfig, SceneSpec};
use crate::losses::LossWeights;
use crate::model::ArchitectureDescriptor;
use crate::tensor::DType;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "UDADET_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {detail}")]
    Parse { origin: String, detail: String },
    #[error("override {0:?} must look like section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Forbids any nondeterministic execution path. All kernels are currently
    /// single-threaded, so this only gets recorded with the outputs.
    pub deterministic: bool,
    /// Element type used for training and inference.
    pub dtype: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            deterministic: false,
            dtype: DType::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Root for `generate-data`; splits go to `source/`, `target/` and `test/`.
    pub out_dir: PathBuf,
    pub source_count: usize,
    pub target_count: usize,
    pub test_count: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("data"),
            source_count: 2000,
            target_count: 2000,
            test_count: 200,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// IoU that a box displaced by the heatmap radius must still reach.
    pub min_overlap: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { min_overlap: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Images per forward pass during evaluation.
    pub batch_size: usize,
    pub checkpoint: Option<PathBuf>,
    /// Labeled manifest for `evaluate`, or any manifest for `export-maps`.
    pub testset: Option<PathBuf>,
    /// JSON report path for `evaluate` / `throughput`.
    pub report: Option<PathBuf>,
    pub export_dir: PathBuf,
    pub export_limit: usize,
    pub gradients_csv: PathBuf,
    pub throughput_iterations: usize,
    pub throughput_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            batch_size: 8,
            checkpoint: None,
            testset: None,
            report: None,
            export_dir: PathBuf::from("maps"),
            export_limit: 8,
            gradients_csv: PathBuf::from("gradients.csv"),
            throughput_iterations: 50,
            throughput_warmup: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataConfig,
    pub model: ArchitectureDescriptor,
    pub codec: CodecConfig,
    pub loss: LossWeights,
    pub decode: DecodeParams,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            data: DataConfig::default(),
            model: ArchitectureDescriptor::default(),
            codec: CodecConfig::default(),
            loss: LossWeights::default(),
            decode: DecodeParams::default(),
            augment: AugmentConfig::standard(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: "config".into(),
            detail: e.to_string(),
        })?;
        Self::from_table(table, "config")
    }

    fn from_table(table: Table, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: origin.into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        if !(self.codec.min_overlap > 0.0 && self.codec.min_overlap < 1.0) {
            return Err(ConfigError::Invalid("codec.min_overlap must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Resolves defaults, an optional file, the process environment and `--set`
    /// style assignments, in that order of precedence.
    pub fn resolve(file: Option<&Path>, assignments: &[String]) -> Result<Self, ConfigError> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::resolve_with_env(file, &env, assignments)
    }

    pub fn resolve_with_env(file: Option<&Path>, env: &[(String, String)], assignments: &[String]) -> Result<Self, ConfigError> {
        let mut table = match Value::try_from(Config::default()).expect("defaults serialize") {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let overlay: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: path.display().to_string(),
                detail: e.to_string(),
            })?;
            merge(&mut table, overlay);
        }
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
            if path.len() < 2 {
                continue;
            }
            set_path(&mut table, &path, parse_scalar(raw));
        }
        for a in assignments {
            let (key, raw) = a.split_once('=').ok_or_else(|| ConfigError::Override(a.clone()))?;
            let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
            if path.len() < 2 || path.iter().any(String::is_empty) {
                return Err(ConfigError::Override(a.clone()));
            }
            set_path(&mut table, &path, parse_scalar(raw.trim()));
        }
        Self::from_table(table, "resolved config")
    }
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.clone(), value);
}

/// Interprets a raw override as a TOML value, falling back to a plain string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
