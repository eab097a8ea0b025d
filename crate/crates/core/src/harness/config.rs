//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterOptions;
use crate::datamodel::{generate_split, ingest_embeddings, Dataset, Split, SyntheticParams};
use crate::error::{Error, Result};
use crate::reasoning::{Ablation, BackendKind, ModelConfig};
use crate::relations::JsMode;

use super::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Hse,
}

/// Dataset source. Synthetic fields apply when `source = "synthetic"`, the
/// paths when `source = "hse"`; a missing validation or test path falls
/// back to the train file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataKind,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub tokens_per_sample: usize,
    pub noise_std: f64,
    pub distractor_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticParams::default();
        DataConfig {
            source: DataKind::Synthetic,
            n_classes: s.n_classes,
            samples_per_class: s.samples_per_class,
            val_per_class: 10,
            test_per_class: 25,
            tokens_per_sample: s.tokens_per_sample,
            noise_std: s.noise_std,
            distractor_fraction: s.distractor_fraction,
            seed: s.seed,
            train_path: None,
            validation_path: None,
            test_path: None,
        }
    }
}

/// Train, validation and test sets sharing one label set.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn synthetic(&self, d: usize, per_class: usize) -> SyntheticParams {
        SyntheticParams {
            n_classes: self.n_classes,
            samples_per_class: per_class,
            d,
            tokens_per_sample: self.tokens_per_sample,
            noise_std: self.noise_std,
            distractor_fraction: self.distractor_fraction,
            seed: self.seed,
        }
    }

    /// Loads or generates all three splits; `base` resolves relative paths.
    pub fn load(&self, d: usize, base: &Path) -> Result<Splits> {
        match self.source {
            DataKind::Synthetic => Ok(Splits {
                train: generate_split(&self.synthetic(d, self.samples_per_class), Split::Train)?,
                validation: generate_split(&self.synthetic(d, self.val_per_class), Split::Validation)?,
                test: generate_split(&self.synthetic(d, self.test_per_class), Split::Test)?,
            }),
            DataKind::Hse => {
                let train_path = self
                    .train_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("hse source needs train_path".into()))?;
                let load = |p: &Option<PathBuf>| ingest_embeddings(base.join(p.as_ref().unwrap_or(train_path)));
                let splits = Splits {
                    train: load(&Some(train_path.clone()))?,
                    validation: load(&self.validation_path)?,
                    test: load(&self.test_path)?,
                };
                for ds in [&splits.validation, &splits.test] {
                    if ds.labels() != splits.train.labels() {
                        return Err(Error::Config("splits disagree on the label set".into()));
                    }
                }
                Ok(splits)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub retention_ratio: f64,
    pub iterations: usize,
    pub alpha_init: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub js_mode: JsMode,
    pub layers: usize,
    pub backend: BackendKind,
    pub freeze_gate: bool,
    pub mass_normalized: bool,
    pub label_axis_weights: bool,
    pub unit_centroids: bool,
    pub ablation: Ablation,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 16,
            k: 8,
            l: 4,
            retention_ratio: 0.5,
            iterations: 30,
            alpha_init: 0.5,
            beta: 0.01,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 2,
            seed: 0,
            js_mode: JsMode::Standard,
            layers: 2,
            backend: BackendKind::Reference,
            freeze_gate: false,
            mass_normalized: false,
            label_axis_weights: false,
            unit_centroids: false,
            ablation: Ablation::none(),
            data: DataConfig::default(),
        }
    }
}

impl Config {
    /// Full-scale settings of the reference MIntRec run (not runnable here).
    pub fn full_scale() -> Self {
        Config {
            d: 3584,
            k: 50,
            l: 25,
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.model_config(2).validate()
    }

    pub fn cluster_options(&self) -> ClusterOptions {
        ClusterOptions {
            iterations: self.iterations,
            mass_normalized: self.mass_normalized,
            label_axis_weights: self.label_axis_weights,
            unit_centroids: self.unit_centroids,
        }
    }

    pub fn model_config(&self, n_labels: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_labels,
            k: self.k,
            l: self.l,
            retention_ratio: self.retention_ratio,
            alpha_init: self.alpha_init,
            js_mode: self.js_mode,
            cluster: self.cluster_options(),
            backend: self.backend,
            layers: self.layers,
            freeze_gate: self.freeze_gate,
            ablation: self.ablation,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = Config::default();
        cfg.ablation.no_cot = true;
        cfg.js_mode = JsMode::PaperVerbatim;
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = Config::from_toml("epochs = 50\n[data]\nnoise_std = 0.0\n").unwrap();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.data.noise_std, 0.0);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.iterations, 30);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("beta = -1.0").is_err());
        assert!(Config::from_toml("retention_ratio = 0.0").is_err());
        assert!(Config::from_toml("epochs = 0").is_err());
        assert!(Config::from_toml("unknown_key = [").is_err());
    }

    #[test]
    fn synthetic_splits_share_labels() {
        let mut cfg = Config::default();
        cfg.data.samples_per_class = 3;
        let s = cfg.data.load(cfg.d, Path::new(".")).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.validation.len(), 40);
        assert_eq!(s.test.len(), 100);
        assert_eq!(s.train.labels(), s.test.labels());
    }

    #[test]
    fn hse_source_needs_a_path() {
        let cfg = Config::from_toml("[data]\nsource = \"hse\"\n").unwrap();
        assert!(cfg.data.load(cfg.d, Path::new(".")).is_err());
    }
}
