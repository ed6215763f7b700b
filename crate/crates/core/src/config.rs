//! Experiment configuration: a TOML document with a strict schema.
//!
//! Unknown keys are rejected everywhere. Every random stream in a run is
//! derived from the top-level `seed`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapter::ModelShapeConfig;
use crate::error::{Error, Result};
use crate::partition::LabelColumn;
use crate::privacy::Surface;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Tri-factor adapters, only `C` communicated, personalized aggregation.
    #[default]
    CeLora,
    /// Two-factor LoRA (`C` pinned to identity), FedAvg over `A` and `B`.
    FedavgLora,
    /// Two-factor LoRA with `A` frozen, FedAvg over `B`.
    FfaLora,
    /// Tri-factor adapters trained without any communication.
    LocalOnly,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::CeLora => "ce-lora",
            Method::FedavgLora => "fedavg-lora",
            Method::FfaLora => "ffa-lora",
            Method::LocalOnly => "local-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::CeLora, Method::FedavgLora, Method::FfaLora, Method::LocalOnly]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::samples")]
        samples: usize,
        #[serde(default = "defaults::raw_dim")]
        raw_dim: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        label_column: LabelColumn,
        #[serde(default = "defaults::yes")]
        has_header: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: defaults::classes(),
            samples: defaults::samples(),
            raw_dim: defaults::raw_dim(),
            separation: defaults::separation(),
            noise: defaults::noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: f64,
    pub min_samples_per_client: usize,
    /// Fraction of each client's shard held out for evaluation.
    pub test_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { clients: 10, alpha: 0.5, min_samples_per_client: 2, test_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Output width of the frozen featurizer.
    pub feature_dim: usize,
    /// Adapted `d→d` layers before the classification head.
    pub hidden_layers: usize,
    pub rank: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { feature_dim: 32, hidden_layers: 0, rank: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub rounds: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs_per_round: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Mode(SigmaMode),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilaritySpec {
    /// Gaussian components per category.
    pub components: usize,
    pub n_probe: usize,
    pub sigma: Sigma,
    pub sinkhorn_eps_factor: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub use_data: bool,
    pub use_model: bool,
    /// Coefficient on `S^model` in the combined affinity.
    pub model_weight: f64,
}

impl Default for SimilaritySpec {
    fn default() -> Self {
        Self {
            components: 3,
            n_probe: 256,
            sigma: Sigma::Mode(SigmaMode::Median),
            sinkhorn_eps_factor: 0.05,
            em_max_iter: 200,
            em_tol: 1e-6,
            use_data: true,
            use_model: true,
            model_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoreAggregation {
    #[default]
    Personalized,
    /// Sample-weighted average of all cores (ablation).
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSpec {
    pub include_self: bool,
    pub core_mode: CoreAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write adapter checkpoints every this many rounds; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub surfaces: Vec<Surface>,
    pub batch_sizes: Vec<usize>,
    /// Number of seeds; seed `s` derives from the master seed.
    pub seeds: usize,
    pub steps: usize,
    pub attack_lr: f64,
    pub restarts: usize,
    pub input_dim: usize,
    pub rank: usize,
    pub classes: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            surfaces: vec![Surface::FullLora, Surface::Ffa, Surface::COnly],
            batch_sizes: vec![1, 4],
            seeds: 10,
            steps: 1000,
            attack_lr: 1.0,
            restarts: 5,
            input_dim: 8,
            rank: 2,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub similarity: SimilaritySpec,
    #[serde(default)]
    pub aggregation: AggregationSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    /// Explicit adapted-matrix shapes for communication accounting; derived
    /// from `model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ModelShapeConfig>,
}

mod defaults {
    pub fn classes() -> usize {
        8
    }
    pub fn samples() -> usize {
        1600
    }
    pub fn raw_dim() -> usize {
        16
    }
    pub fn separation() -> f64 {
        3.0
    }
    pub fn noise() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn epochs() -> usize {
        2
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
}

/// Set `path` (dot-separated) in a TOML table. The value is parsed as a TOML
/// value when possible and kept as a string otherwise.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {path:?}")))?;
    let mut cur = table;
    for k in keys {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {path:?}: {k:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key=value` overrides, and validate.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        // `train` is the only required table; name the missing key itself
        let has_rounds = text.parse::<toml::Table>().ok().map(|t| t.get("train").and_then(|v| v.get("rounds")).is_some());
        let overridden = overrides.iter().any(|(k, _)| k == "train.rounds");
        if has_rounds == Some(false) && !overridden {
            return Err(Error::Config("missing field `train.rounds`".into()));
        }
        let cfg: ExperimentConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            for (k, v) in overrides {
                apply_override(&mut table, k, v)?;
            }
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if let DatasetSpec::Synthetic { classes, samples, raw_dim, separation, noise } = &self.dataset {
            if *classes < 2 {
                return bad("dataset.classes", "must be >= 2");
            }
            if samples < classes {
                return bad("dataset.samples", "must be >= classes");
            }
            if *raw_dim == 0 {
                return bad("dataset.raw_dim", "must be positive");
            }
            if !(separation.is_finite() && *separation >= 0.0 && noise.is_finite() && *noise >= 0.0) {
                return bad("dataset.separation/noise", "must be finite and non-negative");
            }
        }
        let p = &self.partition;
        if p.clients == 0 {
            return bad("partition.clients", "must be >= 1");
        }
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return bad("partition.alpha", "must be positive");
        }
        if !(0.0..1.0).contains(&p.test_fraction) {
            return bad("partition.test_fraction", "must be in [0, 1)");
        }
        if self.model.feature_dim == 0 || self.model.rank == 0 {
            return bad("model", "feature_dim and rank must be positive");
        }
        let t = &self.train;
        if t.epochs_per_round == 0 {
            return bad("train.epochs_per_round", "must be positive");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return bad("train.learning_rate", "must be finite and non-negative");
        }
        let s = &self.similarity;
        if s.components == 0 {
            return bad("similarity.components", "must be positive");
        }
        if s.n_probe < 2 {
            return bad("similarity.n_probe", "must be >= 2");
        }
        if let Sigma::Fixed(v) = s.sigma {
            if !(v > 0.0 && v.is_finite()) {
                return bad("similarity.sigma", "must be \"median\" or a positive number");
            }
        }
        if !(s.sinkhorn_eps_factor > 0.0) {
            return bad("similarity.sinkhorn_eps_factor", "must be positive");
        }
        if !(s.model_weight >= 0.0 && s.model_weight.is_finite()) {
            return bad("similarity.model_weight", "must be finite and non-negative");
        }
        let a = &self.attack;
        if a.steps == 0 || a.restarts == 0 || a.seeds == 0 || a.batch_sizes.contains(&0) {
            return bad("attack", "steps, restarts, seeds and batch sizes must be positive");
        }
        if !(a.attack_lr > 0.0) {
            return bad("attack.attack_lr", "must be positive");
        }
        if let Some(shape) = &self.shape {
            shape.validate()?;
        }
        Ok(())
    }

    /// Adapted-matrix shapes: the explicit `[shape]` table, or the model's
    /// own layers (`hidden_layers` of `d→d` plus the `d→classes` head).
    pub fn model_shape(&self, classes: usize) -> ModelShapeConfig {
        if let Some(s) = &self.shape {
            return s.clone();
        }
        let d = self.model.feature_dim;
        let layers = self.model.hidden_layers + 1;
        let mut k = vec![d; self.model.hidden_layers];
        k.push(classes);
        ModelShapeConfig { layers, rank: self.model.rank, d: vec![d], k }
    }
}
