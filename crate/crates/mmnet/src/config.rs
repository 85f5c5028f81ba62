//! TOML training configuration. Unknown fields are rejected by name.

use std::path::Path;

use mmnet_core::arch::MMNetConfig;
use mmnet_core::data::AugmentConfig;
use mmnet_core::objectives::LossWeights;
use mmnet_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_multiplier: f32,
    pub input_size: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width_multiplier: 1.0,
            input_size: 256,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub augment: bool,
    pub quantization_aware: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.adam.lr,
            weight_decay: d.adam.weight_decay,
            batch_size: d.batch_size,
            steps: d.max_steps,
            seed: d.seed,
            checkpoint_every: d.checkpoint_every,
            augment: true,
            quantization_aware: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f32,
    pub compositional: f32,
    pub kl: f32,
    pub gradient: f32,
    pub aux: f32,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            alpha: w.alpha,
            compositional: w.compositional,
            kl: w.kl,
            gradient: w.gradient,
            aux: w.aux,
        }
    }
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<TrainFile> {
        let f: TrainFile = toml::from_str(text).map_err(|e| Error::Input(format!("invalid training config: {}", e.message())))?;
        f.net_config().validate()?;
        f.train_config().validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<TrainFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainFile::parse(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn net_config(&self) -> MMNetConfig {
        MMNetConfig::new(self.model.width_multiplier, self.model.input_size)
    }

    pub fn train_config(&self) -> TrainConfig {
        let (t, l) = (&self.train, &self.loss);
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                ..Default::default()
            },
            batch_size: t.batch_size,
            max_steps: t.steps,
            seed: t.seed,
            loss_weights: LossWeights {
                alpha: l.alpha,
                compositional: l.compositional,
                kl: l.kl,
                gradient: l.gradient,
                aux: l.aux,
            },
            augment: t.augment.then(|| AugmentConfig::with_target(self.model.input_size)),
            checkpoint_every: t.checkpoint_every,
            quantization_aware: t.quantization_aware,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let f = TrainFile::parse("").unwrap();
        assert_eq!(f, TrainFile::default());
        assert_eq!(f.train_config().adam.lr, 1e-4);
        assert_eq!(f.train_config().adam.weight_decay, 4e-7);
        assert_eq!(f.train_config().batch_size, 32);
    }

    #[test]
    fn sections_override_fields() {
        let f = TrainFile::parse("[model]\nwidth_multiplier = 0.35\ninput_size = 64\n[train]\nsteps = 7\naugment = false\n[loss]\nkl = 0.5\n").unwrap();
        let c = f.train_config();
        assert_eq!(f.net_config(), MMNetConfig::new(0.35, 64));
        assert_eq!(c.max_steps, 7);
        assert!(c.augment.is_none());
        assert_eq!(c.loss_weights.kl, 0.5);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = TrainFile::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainFile::parse("[train]\nlr = -1.0\n").is_err());
        assert!(TrainFile::parse("[model]\ninput_size = 50\n").is_err());
        assert!(TrainFile::parse("[loss]\nalpha = -1.0\n").is_err());
    }
}
