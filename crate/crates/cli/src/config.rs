//! Flat JSON experiment configs with per-experiment defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use inloop::augment::{Registry, BUILTIN_OPS};
use inloop::meta::{RewardMode, TrainConfig};
use inloop::nn::{AdamConfig, LayerSpec, SgdConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    NoisySplits,
    Ola,
    Verify,
    Overhead,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::NoisySplits => "noisy-splits",
            Experiment::Ola => "ola",
            Experiment::Verify => "verify",
            Experiment::Overhead => "overhead",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `synth` or `cifar10:<file>[,<file>...]` (a directory means its
/// `data_batch_*.bin` files).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synth,
    Cifar10(Vec<PathBuf>),
}

impl FromStr for DatasetSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(DatasetSource::Synth);
        }
        match s.strip_prefix("cifar10:") {
            Some(rest) if !rest.is_empty() => Ok(DatasetSource::Cifar10(
                rest.split(',').map(PathBuf::from).collect(),
            )),
            _ => Err(CliError::Config(format!(
                "dataset must be `synth` or `cifar10:<path>`, got `{s}`"
            ))),
        }
    }
}

impl DatasetSource {
    /// Concrete batch files, expanding directories.
    pub fn files(&self) -> Result<Vec<PathBuf>> {
        let DatasetSource::Cifar10(paths) = self else {
            return Ok(Vec::new());
        };
        let mut files = Vec::new();
        for p in paths {
            if p.is_dir() {
                let mut batch: Vec<PathBuf> = std::fs::read_dir(p)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| {
                        f.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                    })
                    .collect();
                batch.sort();
                if batch.is_empty() {
                    return Err(CliError::Config(format!(
                        "no data_batch_*.bin files in {}",
                        p.display()
                    )));
                }
                files.extend(batch);
            } else {
                files.push(p.clone());
            }
        }
        Ok(files)
    }
}

/// Every knob of every experiment. Fields an experiment does not use are
/// ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Seeds `seed, seed + 1, …` are run in turn.
    pub runs: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    pub meta_learning_rate: f64,
    pub meta_beta1: f64,
    pub meta_beta2: f64,
    pub meta_eps: f64,
    pub window: usize,
    pub mode: RewardMode,
    pub dataset: String,
    pub network: Vec<String>,
    pub augmentations: Vec<String>,
    pub out: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub splits: usize,
    pub noisy_split: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Pixel noise std of synthetic images.
    pub pixel_noise: f64,
    /// Held-out examples for test accuracy.
    pub test_examples: usize,
    /// Cap on uniform-baseline strengths.
    pub strength_cap: u8,
    pub warmup: usize,
    pub iterations: usize,
    /// Independent timing passes, for the stability check.
    pub repeats: usize,
    pub verify_batch_sizes: Vec<usize>,
    pub fd_step: f64,
    pub no_effect: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            seed: 0,
            runs: 1,
            steps: 1000,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            l2: 5e-4,
            meta_learning_rate: 0.1,
            meta_beta1: 0.9,
            meta_beta2: 0.999,
            meta_eps: 1e-8,
            window: 10,
            mode: RewardMode::Gar,
            dataset: "synth".into(),
            network: strings(&["flatten", "linear:200", "bias", "relu", "linear:10", "bias"]),
            augmentations: strings(&BUILTIN_OPS),
            out: PathBuf::from("out").join(experiment.name()),
            classes: 10,
            per_class: 1000,
            dims: 32,
            splits: 10,
            noisy_split: 0,
            channels: 3,
            image_size: 8,
            pixel_noise: 0.05,
            test_examples: 1000,
            strength_cap: 30,
            warmup: 10,
            iterations: 50,
            repeats: 2,
            verify_batch_sizes: vec![4, 16, 64, 256],
            fd_step: 1e-5,
            no_effect: false,
        };
        match experiment {
            Experiment::NoisySplits => Self {
                runs: 5,
                steps: 1500,
                batch_size: 256,
                ..base
            },
            Experiment::Ola => Self {
                runs: 3,
                steps: 2000,
                batch_size: 512,
                window: 1,
                meta_learning_rate: 0.0035,
                pixel_noise: 0.6,
                per_class: 300,
                network: strings(&["conv:8:3", "bias", "relu", "flatten", "linear:10", "bias"]),
                ..base
            },
            Experiment::Verify => base,
            Experiment::Overhead => Self {
                batch_size: 128,
                image_size: 16,
                per_class: 32,
                network: strings(&[
                    "conv:16:3",
                    "bias",
                    "relu",
                    "conv:16:3",
                    "bias",
                    "relu",
                    "flatten",
                    "linear:10",
                    "bias",
                ]),
                ..base
            },
        }
    }

    /// Defaults for `experiment` overlaid with the keys of a JSON object.
    pub fn from_json(experiment: Experiment, text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(overlay) = overlay else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(Self::defaults(experiment))?;
        let Value::Object(fields) = &mut merged else {
            unreachable!("config serializes to an object");
        };
        for (key, value) in overlay {
            fields.insert(key, value);
        }
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.experiment != experiment {
            return Err(CliError::Config(format!(
                "config is for `{}`, not `{experiment}`",
                cfg.experiment
            )));
        }
        Ok(cfg)
    }

    pub fn load(experiment: Experiment, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(experiment, &text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CliError::Config(format!("{what} must be positive")));
        for (name, v) in [
            ("runs", self.runs),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("classes", self.classes),
            ("per_class", self.per_class),
            ("dims", self.dims),
            ("splits", self.splits),
            ("channels", self.channels),
            ("image_size", self.image_size),
            ("iterations", self.iterations),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return bad(name);
            }
        }
        if self.steps == 0 {
            return bad("steps");
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(CliError::Config("pixel_noise must be non-negative".into()));
        }
        if !(self.fd_step > 0.0) {
            return bad("fd_step");
        }
        if self.verify_batch_sizes.is_empty() || self.verify_batch_sizes.contains(&0) {
            return bad("every verify batch size");
        }
        if self.noisy_split >= self.splits {
            return Err(CliError::Config(format!(
                "noisy_split {} is not below splits {}",
                self.noisy_split, self.splits
            )));
        }
        self.sgd().validate().map_err(config_err)?;
        self.adam().validate().map_err(config_err)?;
        self.layer_specs()?;
        self.registry()?;
        self.dataset_source()?;
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            l2: self.l2,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.meta_learning_rate,
            beta1: self.meta_beta1,
            beta2: self.meta_beta2,
            eps: self.meta_eps,
        }
    }

    pub fn train_config(&self, mode: RewardMode) -> TrainConfig {
        TrainConfig {
            mode,
            sgd: self.sgd(),
            adam: self.adam(),
            window: self.window,
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.network
            .iter()
            .map(|s| s.parse().map_err(config_err))
            .collect()
    }

    pub fn registry(&self) -> Result<Registry> {
        Registry::from_names(&self.augmentations).map_err(config_err)
    }

    pub fn dataset_source(&self) -> Result<DatasetSource> {
        self.dataset.parse()
    }

    /// Seeds of all runs.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.seed + r).collect()
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn config_err(e: inloop::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for e in [
            Experiment::NoisySplits,
            Experiment::Ola,
            Experiment::Verify,
            Experiment::Overhead,
        ] {
            ExperimentConfig::defaults(e).validate().unwrap();
        }
    }

    #[test]
    fn overlay_replaces_only_given_keys() {
        let cfg =
            ExperimentConfig::from_json(Experiment::NoisySplits, r#"{"steps": 7, "mode": "nslr"}"#)
                .unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.mode, RewardMode::Nslr);
        assert_eq!(cfg.batch_size, 256);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = ExperimentConfig::from_json(Experiment::Ola, r#"{"stpes": 3}"#).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
    }

    #[test]
    fn wrong_experiment_is_rejected() {
        let err = ExperimentConfig::from_json(Experiment::Ola, r#"{"experiment": "verify"}"#)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unresolved_names_fail_validation() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Ola);
        cfg.augmentations.push("posterize".into());
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = ExperimentConfig::defaults(Experiment::Ola);
        cfg.network[0] = "conv:8".into();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = ExperimentConfig::defaults(Experiment::Ola);
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn dataset_sources_parse() {
        assert_eq!(
            "synth".parse::<DatasetSource>().unwrap(),
            DatasetSource::Synth
        );
        assert_eq!(
            "cifar10:a.bin,b.bin".parse::<DatasetSource>().unwrap(),
            DatasetSource::Cifar10(vec!["a.bin".into(), "b.bin".into()])
        );
        assert!("cifar10:".parse::<DatasetSource>().is_err());
        assert!("mnist".parse::<DatasetSource>().is_err());
    }
}
