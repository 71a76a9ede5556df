//! Flat experiment configuration with profile presets.
//!
//! A config file names a `profile` (`cifar`, `desk` or `imagenet`); every key
//! it does not set is taken from that profile. Serializing a loaded config
//! writes every key, so the result reloads to an identical value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Architecture;
use crate::cohort::MixingFlags;
use crate::data::{Augment, DatasetSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::KdHyperparams;
use crate::training::Schedule;

pub const PROFILES: [&str; 3] = ["cifar", "desk", "imagenet"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset the unset keys come from.
    pub profile: String,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    /// Results, metrics and checkpoints go here.
    pub out_dir: PathBuf,

    /// `synthetic`, `cifar10`, `cifar100` or `folder`.
    pub dataset: String,
    /// Root of the on-disk dataset (ignored for `synthetic`).
    pub data_dir: String,
    /// Keep this many training images per class (0 keeps all).
    pub train_per_class: usize,
    /// Keep this many test images per class (0 keeps all).
    pub test_per_class: usize,
    pub synthetic_classes: usize,
    pub synthetic_side: usize,
    pub synthetic_train_size: usize,
    pub synthetic_test_size: usize,
    pub synthetic_seed: u64,
    pub synthetic_blobs: usize,
    /// Independent appearance modes per class.
    pub synthetic_modes: usize,
    pub synthetic_shift: usize,
    pub synthetic_noise: f64,
    pub synthetic_distractor: f64,
    pub synthetic_label_noise: f64,
    /// Zero-padding of the random crop.
    pub augment_pad: usize,
    pub augment_flip: bool,

    /// One entry per cohort member, e.g. `tiny-resnet-w8-b1`.
    pub architectures: Vec<Architecture>,
    /// Images per step; a multiple of 4 (one quadruple is 4 images).
    pub batch_size: usize,

    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub temperature: f64,
    pub warmup_epochs: usize,
    /// Beta concentration of the local-mixing ratio.
    pub alpha1: f64,
    /// Beta concentration of the global-mixing ratio.
    pub alpha2: f64,
    pub local_mixing: bool,
    pub global_mixing: bool,

    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cross-entropy epochs per network before distillation (0 skips).
    pub pretrain_epochs: usize,

    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (0 only at the end).
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    /// 160-epoch CIFAR-100 recipe with ResNet-32-shaped peers.
    pub fn cifar() -> Self {
        let arch = Architecture::TinyResNet { width: 16, blocks: 5 };
        Self {
            profile: "cifar".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/cifar"),
            dataset: "cifar100".into(),
            data_dir: "data/cifar-100-binary".into(),
            train_per_class: 0,
            test_per_class: 0,
            synthetic_classes: 10,
            synthetic_side: 12,
            synthetic_train_size: 10_000,
            synthetic_test_size: 2_000,
            synthetic_seed: 2023,
            synthetic_blobs: 3,
            synthetic_modes: 1,
            synthetic_shift: 2,
            synthetic_noise: 0.35,
            synthetic_distractor: 0.5,
            synthetic_label_noise: 0.0,
            augment_pad: 4,
            augment_flip: true,
            architectures: vec![arch, arch],
            batch_size: 128,
            beta: 4.0,
            gamma: 0.04,
            delta: 2.0,
            temperature: 4.0,
            warmup_epochs: 20,
            alpha1: 1.0,
            alpha2: 0.2,
            local_mixing: true,
            global_mixing: true,
            lr: 0.05,
            decay_epochs: vec![40, 70, 100, 130],
            decay_factor: 0.1,
            epochs: 160,
            momentum: 0.9,
            weight_decay: 5e-4,
            pretrain_epochs: 160,
            eval_every: 1,
            checkpoint_every: 10,
        }
    }

    /// 100-epoch ImageNet-style recipe over a class-folder dataset.
    pub fn imagenet() -> Self {
        let arch = Architecture::TinyResNet { width: 64, blocks: 2 };
        Self {
            profile: "imagenet".into(),
            out_dir: PathBuf::from("runs/imagenet"),
            dataset: "folder".into(),
            data_dir: "data/imagenet".into(),
            architectures: vec![arch, arch],
            batch_size: 256,
            lr: 0.02,
            decay_epochs: vec![10, 40, 70],
            epochs: 100,
            weight_decay: 1e-4,
            pretrain_epochs: 100,
            ..Self::cifar()
        }
    }

    /// Synthetic 10-class, 10⁴-image experiment that runs in minutes on a
    /// CPU.
    pub fn desk() -> Self {
        let arch = Architecture::TinyResNet { width: 8, blocks: 1 };
        Self {
            profile: "desk".into(),
            out_dir: PathBuf::from("runs/desk"),
            dataset: "synthetic".into(),
            data_dir: String::new(),
            synthetic_shift: 3,
            synthetic_noise: 1.5,
            synthetic_distractor: 1.5,
            augment_pad: 1,
            augment_flip: false,
            architectures: vec![arch, arch],
            warmup_epochs: 5,
            decay_epochs: vec![10, 15],
            epochs: 20,
            pretrain_epochs: 0,
            checkpoint_every: 5,
            ..Self::cifar()
        }
    }

    pub fn preset(profile: &str) -> Result<Self> {
        match profile {
            "cifar" => Ok(Self::cifar()),
            "desk" => Ok(Self::desk()),
            "imagenet" => Ok(Self::imagenet()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected one of {PROFILES:?})"
            ))),
        }
    }

    /// Parse a flat TOML document, filling unset keys from its profile (or
    /// from `default_profile` when it names none).
    pub fn from_toml_with(text: &str, default_profile: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match user.get("profile") {
            Some(toml::Value::String(p)) => p.clone(),
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => default_profile.to_owned(),
        };
        let mut merged = toml::Table::try_from(Self::preset(&profile)?).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in user {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, "cifar")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The config with everything that does not affect results blanked, for
    /// resume consistency checks.
    pub fn identity(&self) -> Self {
        Self {
            out_dir: PathBuf::new(),
            checkpoint_every: 0,
            eval_every: 0,
            ..self.clone()
        }
    }

    pub fn hp(&self) -> KdHyperparams {
        KdHyperparams {
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
            temperature: self.temperature,
            warmup_epochs: self.warmup_epochs,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            initial_lr: self.lr,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            total_epochs: self.epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// The distillation schedule stretched or cut to the pretraining budget.
    pub fn pretrain_schedule(&self) -> Schedule {
        Schedule {
            decay_epochs: self.decay_epochs.iter().copied().filter(|&e| e < self.pretrain_epochs).collect(),
            total_epochs: self.pretrain_epochs,
            ..self.schedule()
        }
    }

    pub fn flags(&self) -> MixingFlags {
        MixingFlags {
            local: self.local_mixing,
            global: self.global_mixing,
        }
    }

    pub fn augment(&self) -> Augment {
        Augment {
            pad: self.augment_pad,
            flip: self.augment_flip,
        }
    }

    pub fn dataset_source(&self) -> Result<DatasetSource> {
        Ok(match self.dataset.as_str() {
            "synthetic" => DatasetSource::Synthetic(SyntheticSpec {
                num_classes: self.synthetic_classes,
                side: self.synthetic_side,
                train_size: self.synthetic_train_size,
                test_size: self.synthetic_test_size,
                seed: self.synthetic_seed,
                blobs_per_class: self.synthetic_blobs,
                modes_per_class: self.synthetic_modes,
                max_shift: self.synthetic_shift,
                noise: self.synthetic_noise,
                distractor: self.synthetic_distractor,
                label_noise: self.synthetic_label_noise,
            }),
            "cifar10" => DatasetSource::Cifar10 { dir: self.data_dir.clone() },
            "cifar100" => DatasetSource::Cifar100 { dir: self.data_dir.clone() },
            "folder" => DatasetSource::Folder { dir: self.data_dir.clone() },
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::preset(&self.profile)?;
        self.dataset_source()?;
        self.hp().validate()?;
        if self.epochs > 0 {
            self.schedule().validate()?;
        }
        if self.pretrain_epochs > 0 {
            self.pretrain_schedule().validate()?;
        }
        if self.architectures.is_empty() {
            return Err(Error::Config("no architectures given".into()));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "batch_size {} must be a positive multiple of 4",
                self.batch_size
            )));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidHyperparameter {
                    name,
                    value: a,
                    reason: "Beta concentration must be positive",
                });
            }
        }
        if !(0.0..=1.0).contains(&self.synthetic_label_noise) {
            return Err(Error::InvalidHyperparameter {
                name: "synthetic_label_noise",
                value: self.synthetic_label_noise,
                reason: "must be a probability",
            });
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be ≥1".into()));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PROFILES {
            let cfg = ExperimentConfig::preset(p).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{p}");
        }
    }

    #[test]
    fn unset_keys_come_from_the_profile() {
        let cfg = ExperimentConfig::from_toml("profile = \"desk\"\nseed = 7\nalpha2 = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha2, 0.5);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::cifar());
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(ExperimentConfig::from_toml("profile = \"mnist\"").is_err());
        assert!(ExperimentConfig::from_toml("learning_rate = 0.1").is_err());
        assert!(ExperimentConfig::from_toml("batch_size = 10").is_err());
        assert!(ExperimentConfig::from_toml("alpha1 = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("decay_epochs = [70, 40]").is_err());
        assert!(ExperimentConfig::from_toml("architectures = [\"vgg\"]").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
