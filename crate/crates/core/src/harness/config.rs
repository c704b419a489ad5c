use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::graph::Variant;
use crate::models::{LossWeights, ModelSpec};
use crate::nn::AdamConfig;
use crate::synth::GeneratorConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "CVRLAB_OUTPUT_ROOT";

pub const DESK_S: &str = "desk-S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Free-form label recorded in the dataset manifests.
    pub preset: String,
    pub train_impressions: u64,
    pub test_impressions: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: DESK_S.to_string(),
            train_impressions: 1_000_000,
            test_impressions: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden_widths: vec![128, 64, 32],
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub precision: Precision,
    /// When false, wall-clock timings are also written into the comparison report.
    pub deterministic: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            epochs: 1,
            learning_rate: AdamConfig::default().learning_rate,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One experiment: a dataset, the variants to train on it and the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_s()
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: 10^6 training impressions at the default rate targets,
    /// five variants, five seeds.
    pub fn desk_s() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk-s"),
            variants: Variant::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            data: DataConfig::default(),
            generator: desk_generator(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self =
            toml::from_str(text).map_err(|e| HarnessError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; the config hash is taken over these bytes.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies the output-root environment override.
    pub fn with_env_override(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                self.output_dir = PathBuf::from(root);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        self.generator
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty".into());
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return bad(format!("variant {v} listed twice"));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        if self.data.train_impressions == 0 || self.data.test_impressions == 0 {
            return bad("train and test impression counts must be positive".into());
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        self.training.adam().validate().map_err(HarnessError::Validation)?;
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir must not be empty".into());
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return bad(format!(
                "output_dir {} exists and is not a directory",
                self.output_dir.display()
            ));
        }
        for v in &self.variants {
            self.model_spec(*v, 0)
                .validate()
                .map_err(|e| HarnessError::Validation(e.to_string()))?;
        }
        Ok(())
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![
            self.generator.n_users,
            self.generator.n_items,
            self.generator.n_categories,
        ]
    }

    pub fn model_spec(&self, variant: Variant, seed: u64) -> ModelSpec {
        let vocab = self.vocab_sizes();
        ModelSpec {
            variant,
            embedding_dims: vec![self.model.embedding_dim; vocab.len()],
            vocab_sizes: vocab,
            hidden_widths: self.model.hidden_widths.clone(),
            loss_weights: self.model.loss_weights,
            seed,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(format!("{}-seed{seed}", variant.name()))
    }

    pub fn oracle_dir(&self) -> PathBuf {
        self.output_dir.join("oracle")
    }
}

/// Generator settings used by the desk presets. Purchase propensity varies
/// little between pairs once the macro outcome is known, so conversion is
/// driven mainly by the macro step, which is itself only loosely tied to micro.
pub fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        weight_scale: 2.0,
        head_scales: [1.0, 1.0, 1.0, 0.25, 1.0, 0.25],
        head_correlation: 0.3,
        macro_offset: 1.0,
        purchase_offset: 5.0,
        ..GeneratorConfig::default()
    }
}
