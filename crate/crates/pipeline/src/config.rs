use std::path::Path;

use anyhow::{bail, Context, Result};
use mid_core::analysis::InterceptMode;
use mid_core::mitigation::{RetrainConfig, VqaClientConfig};
use mid_core::nncore::{ModelSpec, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::digest::digest_json;

pub const CONFIG_SCHEMA_VERSION: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub intercept: InterceptConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub triage: TriageConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Sweep worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub biases: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the fair (b = 0) test set shared by every run.
    pub test_seed: u64,
    /// Fraction of training labels flipped after sampling.
    pub label_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            biases: (0..10).map(|i| i as f64 / 10.0).collect(),
            seeds: (0..5).collect(),
            n_train: 30_000,
            n_test: 10_000,
            test_seed: 424_242,
            label_noise: 0.0,
        }
    }
}

/// Stride 2 in the first convolution keeps a 30k-sample epoch at about
/// 15 s on one core.
pub fn default_model() -> ModelSpec {
    ModelSpec { conv_strides: [2, 1], ..ModelSpec::default() }
}

/// Four epochs: shape is learned on unbiased data while strongly biased runs
/// still lean on position. Larger batches never learned shape at all.
pub fn default_train() -> TrainConfig {
    TrainConfig { learning_rate: 2e-3, optimizer: Optimizer::Adam, batch_size: 100, epochs: 4, ..TrainConfig::default() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InterceptConfig {
    /// Samples per class; `None` uses 5% of the training set.
    pub window: Option<usize>,
    pub mode: InterceptMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k_range: Vec<usize>,
    /// The k whose clusters are triaged.
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_range: vec![2, 3, 4, 5, 6], k: 3, seed: 0, n_init: 5, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriagePolicy {
    /// Wait for a selection file written by the CLI or the API.
    #[default]
    Manual,
    /// Tag by ground-truth minority share; evaluation only.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TriageConfig {
    pub policy: TriagePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    #[default]
    GroundTruth,
    AlwaysAgree,
    External {
        /// Falls back to `MID_ORACLE_URL`.
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        question_template: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        retries: Option<u32>,
    },
}

impl OracleConfig {
    pub fn vqa_config(&self) -> Result<Option<VqaClientConfig>> {
        let OracleConfig::External { endpoint, question_template, timeout_ms, retries } = self else {
            return Ok(None);
        };
        let endpoint = match endpoint {
            Some(e) => e.clone(),
            None => std::env::var(crate::ENV_ORACLE_URL).with_context(|| format!("external oracle needs an endpoint or {}", crate::ENV_ORACLE_URL))?,
        };
        let mut cfg = VqaClientConfig::new(endpoint);
        if let Some(q) = question_template {
            cfg.question_template = q.clone();
        }
        if let Some(t) = timeout_ms {
            cfg.timeout_ms = *t;
        }
        if let Some(r) = retries {
            cfg.retries = *r;
        }
        Ok(Some(cfg))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataConfig::default(),
            model: default_model(),
            train: default_train(),
            intercept: InterceptConfig::default(),
            cluster: ClusterConfig::default(),
            triage: TriageConfig::default(),
            retrain: RetrainConfig::default(),
            oracle: OracleConfig::default(),
            workers: 0,
        }
    }
}

/// Upgrades an older document in place. Version 1 named the window
/// `intercept.window_size` and the k list `cluster.k_values`.
fn migrate(doc: &mut toml::Table) -> Result<()> {
    let version = match doc.get("schema_version") {
        Some(v) => v.as_integer().context("schema_version must be an integer")?,
        None => bail!("config has no schema_version"),
    };
    if version == 1 {
        let rename = |doc: &mut toml::Table, section: &str, from: &str, to: &str| {
            if let Some(toml::Value::Table(t)) = doc.get_mut(section) {
                if let Some(v) = t.remove(from) {
                    t.insert(to.to_string(), v);
                }
            }
        };
        rename(doc, "intercept", "window_size", "window");
        rename(doc, "cluster", "k_values", "k_range");
        doc.insert("schema_version".into(), toml::Value::Integer(2));
    } else if version != CONFIG_SCHEMA_VERSION as i64 {
        bail!("unsupported config schema_version {version} (this build reads 1..={CONFIG_SCHEMA_VERSION})");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        migrate(&mut doc)?;
        let cfg: Self = toml::Value::Table(doc).try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.biases.is_empty() || self.data.seeds.is_empty() {
            bail!("data.biases and data.seeds must be non-empty");
        }
        for &b in &self.data.biases {
            if !(0.0..=1.0).contains(&b) {
                bail!("bias {b} outside [0, 1]");
            }
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            bail!("data.n_train and data.n_test must be positive");
        }
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            bail!("data.label_noise outside [0, 1]");
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.train.epochs == 0 {
            bail!("train.epochs must be at least 1");
        }
        if self.intercept.window == Some(0) {
            bail!("intercept.window must be at least 1");
        }
        if self.cluster.k_range.is_empty() || self.cluster.k_range.contains(&0) {
            bail!("cluster.k_range must be non-empty with positive entries");
        }
        if !self.cluster.k_range.contains(&self.cluster.k) {
            bail!("cluster.k = {} is not in cluster.k_range", self.cluster.k);
        }
        if self.cluster.n_init == 0 {
            bail!("cluster.n_init must be at least 1");
        }
        self.retrain.validate()?;
        self.oracle.vqa_config()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for &b in &self.data.biases {
            for &s in &self.data.seeds {
                ids.push(run_id(b, s));
            }
        }
        ids
    }
}

/// `b0.80-s3` style identifier of one (bias, seed) cell.
pub fn run_id(bias: f64, seed: u64) -> String {
    format!("b{bias:.2}-s{seed}")
}

pub fn parse_run_id(id: &str) -> Option<(f64, u64)> {
    let rest = id.strip_prefix('b')?;
    let (b, s) = rest.split_once("-s")?;
    Some((b.parse().ok()?, s.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("schema_version = 2\n").unwrap();
        assert_eq!(cfg.data.biases.len(), 10);
        assert_eq!(cfg.run_ids().len(), 50);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\ncolour = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n[data]\nbiasses = [0.1]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 9\n").is_err());
    }

    #[test]
    fn version_one_is_migrated() {
        let v1 = "schema_version = 1\n[intercept]\nwindow_size = 40\n[cluster]\nk_values = [2, 3]\nk = 2\n";
        let cfg = ExperimentConfig::from_toml_str(v1).unwrap();
        assert_eq!(cfg.intercept.window, Some(40));
        assert_eq!(cfg.cluster.k_range, vec![2, 3]);
        assert_eq!(cfg.schema_version, 2);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n[data]\nbiases = [1.5]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\n[cluster]\nk_range = [2]\nk = 3\n").is_err());
    }

    #[test]
    fn run_id_roundtrip() {
        assert_eq!(run_id(0.8, 3), "b0.80-s3");
        assert_eq!(parse_run_id("b0.80-s3"), Some((0.8, 3)));
        assert_eq!(parse_run_id("ext-x"), None);
    }
}
