//! Flat key-value run configuration covering the model, optimizer, synthetic
//! data and training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::optim::AdamConfig;
use crate::saat::{MaskMode, SaatConfig};
use crate::soan::{SoanConfig, SoanVariant};

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Side of the random square crop; `0` trains on full images.
    pub patch_size: usize,
    /// Total optimizer steps.
    pub steps: u64,
    /// Synthetic training and validation set sizes.
    pub train_count: usize,
    pub val_count: usize,
    /// Validation cadence in steps; `0` validates once per epoch.
    pub val_every: u64,
    pub log_every: u64,
    /// Seed of the frozen feature extractor used by the perceptual loss.
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            patch_size: 64,
            steps: 2000,
            train_count: 500,
            val_count: 50,
            val_every: 0,
            log_every: 10,
            perceptual_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Every tunable as one flat table; missing keys take their defaults and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ablation: Ablation,
    pub base_width: usize,
    pub scales: usize,
    pub max_width: usize,
    pub enable_soan: bool,
    pub enable_saat: bool,
    pub soan_variant: SoanVariant,
    pub soan_eps: f64,
    pub saat_heads: usize,
    pub saat_layers: usize,
    pub saat_mask_mode: MaskMode,
    pub saat_ffn_expansion: usize,
    pub predictor_width: usize,
    pub predictor_depth: usize,
    pub token_grid: usize,
    pub input_residual: bool,
    pub lambda_rem: f64,
    pub lambda_soft: f64,
    pub lambda_per: f64,
    pub lambda_grad: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_factor: f64,
    pub decay_patience: usize,

    pub synth_size: usize,
    pub synth_scene_min: usize,
    pub synth_scene_max: usize,
    pub synth_shadow_min: usize,
    pub synth_shadow_max: usize,
    pub synth_attenuation_min: f32,
    pub synth_attenuation_max: f32,
    pub synth_blur_min: f32,
    pub synth_blur_max: f32,
    pub synth_noise: f32,

    pub seed: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub steps: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub val_every: u64,
    pub log_every: u64,
    pub perceptual_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_parts(&ModelConfig::default(), &AdamConfig::default(), &SynthSpec::default(), &TrainConfig::default())
    }
}

impl Config {
    pub fn from_parts(m: &ModelConfig, a: &AdamConfig, s: &SynthSpec, t: &TrainConfig) -> Self {
        Config {
            ablation: Ablation::Full,
            base_width: m.base_width,
            scales: m.scales,
            max_width: m.max_width,
            enable_soan: m.enable_soan,
            enable_saat: m.enable_saat,
            soan_variant: m.soan.variant,
            soan_eps: m.soan.eps,
            saat_heads: m.saat.heads,
            saat_layers: m.saat.layers,
            saat_mask_mode: m.saat.mask_mode,
            saat_ffn_expansion: m.saat.ffn_expansion,
            predictor_width: m.predictor_width,
            predictor_depth: m.predictor_depth,
            token_grid: m.token_grid,
            input_residual: m.input_residual,
            lambda_rem: m.lambda[0],
            lambda_soft: m.lambda[1],
            lambda_per: m.lambda[2],
            lambda_grad: m.lambda[3],
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            decay_factor: a.decay_factor,
            decay_patience: a.decay_patience,
            synth_size: s.size,
            synth_scene_min: s.scene_shapes.0,
            synth_scene_max: s.scene_shapes.1,
            synth_shadow_min: s.shadow_shapes.0,
            synth_shadow_max: s.shadow_shapes.1,
            synth_attenuation_min: s.attenuation.0,
            synth_attenuation_max: s.attenuation.1,
            synth_blur_min: s.blur.0,
            synth_blur_max: s.blur.1,
            synth_noise: s.noise,
            seed: t.seed,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            steps: t.steps,
            train_count: t.train_count,
            val_count: t.val_count,
            val_every: t.val_every,
            log_every: t.log_every,
            perceptual_seed: t.perceptual_seed,
        }
    }

    /// Model configuration with the ablation switch applied.
    pub fn model(&self) -> ModelConfig {
        let base = ModelConfig {
            base_width: self.base_width,
            scales: self.scales,
            max_width: self.max_width,
            soan: SoanConfig {
                variant: self.soan_variant,
                eps: self.soan_eps,
            },
            saat: SaatConfig {
                heads: self.saat_heads,
                layers: self.saat_layers,
                mask_mode: self.saat_mask_mode,
                ffn_expansion: self.saat_ffn_expansion,
                ..SaatConfig::default()
            },
            enable_soan: self.enable_soan,
            enable_saat: self.enable_saat,
            predictor_width: self.predictor_width,
            predictor_depth: self.predictor_depth,
            token_grid: self.token_grid,
            input_residual: self.input_residual,
            lambda: [self.lambda_rem, self.lambda_soft, self.lambda_per, self.lambda_grad],
        };
        self.ablation.apply(&base)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            decay_factor: self.decay_factor,
            decay_patience: self.decay_patience,
        }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            size: self.synth_size,
            scene_shapes: (self.synth_scene_min, self.synth_scene_max),
            shadow_shapes: (self.synth_shadow_min, self.synth_shadow_max),
            attenuation: (self.synth_attenuation_min, self.synth_attenuation_max),
            blur: (self.synth_blur_min, self.synth_blur_max),
            noise: self.synth_noise,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            steps: self.steps,
            train_count: self.train_count,
            val_count: self.val_count,
            val_every: self.val_every,
            log_every: self.log_every,
            perceptual_seed: self.perceptual_seed,
        }
    }

    /// Full-resolution settings: 256 crops, batch 8, and 200 epochs over the
    /// training set.
    pub fn paper_scale(mut self) -> Self {
        self.patch_size = 256;
        self.batch_size = 8;
        self.synth_size = 256;
        self.steps = 200 * self.train_count.div_ceil(self.batch_size) as u64;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model();
        m.validate()?;
        m.saat.validate()?;
        self.adam().validate()?;
        self.synth().validate()?;
        self.train().validate()?;
        if self.patch_size != 0 && !self.patch_size.is_multiple_of(m.required_multiple()) {
            return Err(Error::Config(format!(
                "patch size {} must be a multiple of {}",
                self.patch_size,
                m.required_multiple()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = Config::default();
        let text = c.to_toml();
        assert!(text.contains("lr = 0.001"));
        assert_eq!(Config::from_toml(&text).unwrap(), c);
        assert_eq!(c.model(), ModelConfig::default());
        assert_eq!(c.adam(), AdamConfig::default());
        assert_eq!(c.synth(), SynthSpec::default());
        assert_eq!(c.train(), TrainConfig::default());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("lr = 0.0005\nablation = \"no-saat\"\nsoan_variant = \"bn\"\n").unwrap();
        assert_eq!(c.lr, 5e-4);
        assert!(!c.model().enable_saat);
        assert_eq!(c.model().soan.variant, SoanVariant::Bn);
        assert_eq!(c.batch_size, 4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("no_such_key = 1").is_err());
        assert!(Config::from_toml("lr = -1.0").is_err());
        assert!(Config::from_toml("patch_size = 60").is_err());
        assert!(Config::from_toml("synth_attenuation_max = 1.5").is_err());
    }

    #[test]
    fn paper_scale_overrides() {
        let c = Config::default().paper_scale();
        assert_eq!((c.patch_size, c.batch_size), (256, 8));
        assert_eq!(c.steps, 200 * 63);
        c.validate().unwrap();
    }
}
