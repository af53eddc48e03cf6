//! Run configuration: one JSON document describing data, model, training,
//! evaluation and the ensemble/generation layout. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::calibration::SearchBracket;
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_dropout() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            dropout: default_dropout(),
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dim: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
        }
    }
}

/// Source of the per-class loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    /// Computed from the training split.
    Computed,
    Uniform,
}

fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_decay_interval() -> usize {
    3
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    6
}
fn default_class_weights() -> ClassWeighting {
    ClassWeighting::Computed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// The learning rate is multiplied by `decay_factor` every
    /// `decay_interval` epochs.
    #[serde(default = "default_decay_interval")]
    pub decay_interval: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    /// Multiple of 3; each batch holds an equal share of every task.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_class_weights")]
    pub class_weights: ClassWeighting,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.decay_interval) as i32;
        self.learning_rate * self.decay_factor.powi(decays)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 6 || !self.batch_size.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "train.batch_size {} must be a multiple of 3 and at least 6",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.decay_interval == 0 {
            return Err(Error::Config("train.decay_interval must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("train.decay_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn default_tau() -> f64 {
    0.05
}
fn default_mc_passes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Epistemic threshold for the OOD fractions.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_mc_passes")]
    pub mc_passes: usize,
    #[serde(default)]
    pub temperature_bracket: SearchBracket,
    /// Seeds the validation half split and the MC dropout passes.
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("eval.tau {} outside (0, 1)", self.tau)));
        }
        if self.mc_passes == 0 {
            return Err(Error::Config("eval.mc_passes must be >= 1".into()));
        }
        self.temperature_bracket.validate()
    }
}

fn default_members() -> usize {
    5
}
fn default_generations() -> usize {
    3
}
fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for member initialisation and training.
    pub seed: u64,
    /// Generator settings used by `gen-data`.
    pub data: GeneratorConfig,
    /// Seed for the generator; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    /// Dataset directory, relative to the config file.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Run directory, relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Ensemble size T.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Student generations K after the teachers.
    #[serde(default = "default_generations")]
    pub generations: usize,
    /// Explicit per-member seeds; derived from `seed` when absent.
    #[serde(default)]
    pub member_seeds: Option<Vec<u64>>,
}

impl RunConfig {
    /// Defaults for everything except the data size.
    pub fn with_data(seed: u64, data: GeneratorConfig) -> Self {
        Self {
            seed,
            data,
            data_seed: None,
            data_dir: default_data_dir(),
            out_dir: default_out_dir(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            members: default_members(),
            generations: default_generations(),
            member_seeds: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a config file; relative paths are resolved
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.arch(self.data.dim).validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.members == 0 {
            return Err(Error::Config("members must be >= 1".into()));
        }
        if let Some(seeds) = &self.member_seeds {
            if seeds.len() != self.members {
                return Err(Error::Config(format!(
                    "member_seeds has {} entries but members is {}",
                    seeds.len(),
                    self.members
                )));
            }
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"seed": 3, "data": {"n": 300, "dim": 8, "mixture_components": 3}}"#).unwrap();
        assert_eq!(cfg.members, 5);
        assert_eq!(cfg.generations, 3);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.eval.mc_passes, 10);
        assert_eq!(cfg.model.hidden, vec![64, 64]);
        assert_eq!(cfg.data_seed(), 3);
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::from_json(r#"{"data": {"n": 300, "dim": 8, "mixture_components": 3}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("seed"), "{err}");
        let err = RunConfig::from_json(r#"{"seed": 1, "data": {"n": 300, "mixture_components": 3}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dim"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_json(
            r#"{"seed": 1, "data": {"n": 30, "dim": 8, "mixture_components": 3}, "train": {"epoch": 3}}"#,
        )
        .unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn schedule_decays_stepwise() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate_at(0), 1e-3);
        assert_eq!(t.learning_rate_at(2), 1e-3);
        assert!((t.learning_rate_at(3) - 1e-4).abs() < 1e-18);
        assert!((t.learning_rate_at(9) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = RunConfig::with_data(0, GeneratorConfig::small(300));
        cfg.train.batch_size = 10;
        assert!(cfg.validate().unwrap_err().is_config_error());
        let mut cfg = RunConfig::with_data(0, GeneratorConfig::small(300));
        cfg.member_seeds = Some(vec![1, 2]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"seed": 1, "data": {"n": 300, "dim": 8, "mixture_components": 3}, "out_dir": "out"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.data_dir, dir.path().join("data"));
    }
}
