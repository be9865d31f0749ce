//! One JSON document describes an experiment end to end. Every seed is
//! explicit, every field participates in the config hash, and named presets
//! reproduce the standard experiment grid with one command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ebc_core::ebc_loss::LossConfig;
use ebc_core::encoder::EncoderArch;
use ebc_core::groups::GroupFamily;
use ebc_core::metrics::{MetricsConfig, ProbeConfig};
use ebc_core::synthdata::{BatchConfig, DatasetConfig, SplitId};
use ebc_core::{Error, Result};

/// Optimization loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    /// Queries per batch, each with its own same-action context.
    pub positives: usize,
    /// Shared negative pool per batch.
    pub negatives: usize,
    /// Paired samples per positive used to estimate the action's transport.
    pub context_size: usize,
    pub lr: f64,
    /// Model seed: encoder initialization and batch order.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 5000,
            positives: 256,
            negatives: 2048,
            context_size: 12,
            lr: 1e-3,
            seed: 2000,
        }
    }
}

/// Evaluation settings; the transport-estimation context at evaluation time
/// always matches the training context size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitId,
    pub gallery_size: usize,
    pub ks: Vec<usize>,
    /// Seed for the fit/report halving and gallery sampling.
    pub seed: u64,
    pub probe: ProbeConfig,
    pub probe_transformed_side: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitId::Test,
            gallery_size: 2000,
            ks: vec![1, 5],
            seed: 4000,
            probe: ProbeConfig::default(),
            probe_transformed_side: false,
        }
    }
}

/// Complete experiment description. The output directory is deliberately not
/// part of the config: it never affects results, so it never enters the hash.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderArch,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            encoder: EncoderArch::mlp(50, vec![128, 128, 128], 3, 3),
            loss: LossConfig::new(3, 3),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.encoder.input_dim != self.dataset.obs_dim {
            return Err(Error::InvalidConfig(format!(
                "encoder input width {} does not match observation dimension {}",
                self.encoder.input_dim, self.dataset.obs_dim
            )));
        }
        if self.encoder.output_style != self.loss.n_style
            || self.encoder.output_content != self.loss.m_content
        {
            return Err(Error::InvalidConfig(format!(
                "encoder output split {}+{} does not match loss split {}+{}",
                self.encoder.output_style,
                self.encoder.output_content,
                self.loss.n_style,
                self.loss.m_content
            )));
        }
        if self.training.positives == 0 || self.training.negatives == 0 {
            return Err(Error::InvalidConfig(
                "positives and negatives must both be nonzero".into(),
            ));
        }
        if !self.training.lr.is_finite() || self.training.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.training.lr
            )));
        }
        if self.training.context_size + 1 > self.dataset.pairs_per_action {
            return Err(Error::InvalidConfig(format!(
                "context size {} plus the query exceeds the {} pairs per action",
                self.training.context_size, self.dataset.pairs_per_action
            )));
        }
        if self.training.context_size < self.loss.n_style {
            return Err(Error::InvalidConfig(format!(
                "context size {} cannot determine a {}-dimensional transport",
                self.training.context_size, self.loss.n_style
            )));
        }
        self.metrics_config().validate()
    }

    /// Batch sampler settings induced by the training and loss configs.
    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            positives: self.training.positives,
            negatives: self.training.negatives,
            context_size: self.training.context_size,
            negatives_mode: self.loss.negatives_mode,
        }
    }

    /// Metric settings induced by the eval block; the evaluation context
    /// budget is the training one by construction.
    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            seed: self.eval.seed,
            context_size: self.training.context_size,
            gallery_size: self.eval.gallery_size,
            ks: self.eval.ks.clone(),
            probe: self.eval.probe.clone(),
            probe_transformed_side: self.eval.probe_transformed_side,
        }
    }
}

/// SHA-256 of the canonical JSON form, hex-encoded. Field order is fixed by
/// the struct definitions, so equal configs hash equally and any change to a
/// result-affecting field changes the hash.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a config file, then applies seed overrides: a CLI flag wins over
/// the EBC_SEED environment variable, which wins over the file value.
pub fn load_config(path: &Path, seed_flag: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)?;
    apply_seed_override(&mut config, seed_flag)?;
    Ok(config)
}

/// Applies the flag/env seed layering to an already-built config.
pub fn apply_seed_override(config: &mut ExperimentConfig, seed_flag: Option<u64>) -> Result<()> {
    if let Some(seed) = seed_flag {
        config.training.seed = seed;
        return Ok(());
    }
    if let Ok(raw) = std::env::var("EBC_SEED") {
        let seed: u64 = raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("EBC_SEED must be an unsigned integer, got '{raw}'"))
        })?;
        config.training.seed = seed;
    }
    Ok(())
}

/// Named experiment presets reproducing the standard grid at desk scale.
pub fn experiment_preset(name: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    match name {
        "table1-so3" => {
            config.dataset.family = GroupFamily::SpecialOrthogonal;
        }
        "table1-o3" => {
            config.dataset.family = GroupFamily::Orthogonal;
        }
        "table1-gl3" => {
            config.dataset.family = GroupFamily::GeneralLinear;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown experiment preset '{other}'; try table1-so3, table1-o3, table1-gl3"
            )))
        }
    }
    Ok(config)
}

pub const EXPERIMENT_PRESETS: &[&str] = &["table1-so3", "table1-o3", "table1-gl3"];
pub const SWEEP_PRESETS: &[&str] = &["table3-ablation", "noise-sweep", "misspec-sweep"];
