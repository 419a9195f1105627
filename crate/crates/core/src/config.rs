//! Declarative run configuration: a flat-section TOML file mirrored by
//! these structs. Flags override file values override built-in defaults;
//! the effective config is echoed into every output bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::data::{DatasetMode, DatasetSpec};
use crate::error::{Error, Result};
use crate::networks::{DenoiserConfig, DiscriminatorConfig, EncoderConfig, DEFAULT_ENCODER_SEED};
use crate::optim::AdamConfig;
use crate::tensor::Dtype;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub alignment_depth: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_seed: u64,
    pub disc_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        // toy profile: keeps the reference architecture's structural ratios
        // (patch grid, ~1/3 alignment depth, 4x mlp) at a width where the
        // full acceptance suite fits a 2-core desk budget
        ModelSection {
            layers: 6,
            hidden_dim: 64,
            heads: 4,
            patch_size: 2,
            alignment_depth: 2,
            encoder_dim: 64,
            encoder_layers: 4,
            encoder_heads: 4,
            encoder_seed: DEFAULT_ENCODER_SEED,
            disc_width: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub label_dropout: f64,
    pub checkpoint_every: u64,
    pub dtype: Dtype,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            seed: 0,
            label_dropout: 0.1,
            checkpoint_every: 0,
            dtype: Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub nfe: usize,
    pub cfg_scale: f64,
    pub guidance_lo: f64,
    pub guidance_hi: f64,
    pub seed: u64,
    pub count: usize,
    pub class: usize,
    pub deterministic_final_step: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            nfe: 250,
            cfg_scale: 1.0,
            guidance_lo: 0.0,
            guidance_hi: 1.0,
            seed: 0,
            count: 16,
            class: 0,
            deterministic_final_step: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub t_probe: f64,
    pub eval_batches: u64,
    pub eval_batch_size: usize,
    pub ref_patches: Vec<usize>,
    /// Report on raw hidden states instead of the projected ones.
    pub use_raw_hidden: bool,
    pub seed: u64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            t_probe: 0.5,
            eval_batches: 4,
            eval_batch_size: 64,
            ref_patches: vec![0, 5],
            use_raw_hidden: false,
            seed: 1,
        }
    }
}

fn default_alignment() -> AlignmentConfig {
    AlignmentConfig::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_alignment")]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
}

impl RunConfig {
    /// Built-in toy profile over a 4-class Gaussian mixture.
    pub fn toy() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                mode: DatasetMode::GaussianMixture,
                latent: (4, 8, 8),
                classes: 4,
                seed: 7,
                mean_scale: 1.0,
                std_range: (0.5, 1.0),
                noise_std: 0.25,
            },
            model: ModelSection::default(),
            alignment: AlignmentConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.alignment.validate()?;
        self.denoiser_config().validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.label_dropout) {
            return Err(Error::Config("label_dropout outside [0,1]".into()));
        }
        if self.sample.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if self.sample.cfg_scale < 1.0 {
            return Err(Error::Config("cfg_scale must be >= 1 (1 = off)".into()));
        }
        if self.sample.guidance_lo > self.sample.guidance_hi {
            return Err(Error::Config("guidance interval lo > hi".into()));
        }
        if !(0.0 < self.diagnose.t_probe && self.diagnose.t_probe <= 1.0) {
            return Err(Error::Config("t_probe outside (0,1]".into()));
        }
        Ok(())
    }

    /// β=γ=0 etc.: loss-term on/off switches for ablations.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        let a = &mut self.alignment;
        match name {
            "none" => {
                a.patch_enabled = false;
                a.structural_enabled = false;
                a.adversarial_enabled = false;
            }
            "patch" => {
                a.patch_enabled = true;
                a.structural_enabled = false;
                a.adversarial_enabled = false;
            }
            "patch+struc" => {
                a.patch_enabled = true;
                a.structural_enabled = true;
                a.adversarial_enabled = false;
            }
            "patch+adv" => {
                a.patch_enabled = true;
                a.structural_enabled = false;
                a.adversarial_enabled = true;
            }
            "struc+adv" => {
                a.patch_enabled = false;
                a.structural_enabled = true;
                a.adversarial_enabled = true;
            }
            "full" => {
                a.patch_enabled = true;
                a.structural_enabled = true;
                a.adversarial_enabled = true;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{}' (expected none|patch|patch+struc|patch+adv|struc+adv|full)",
                    other
                )))
            }
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.model.layers,
            hidden_dim: self.model.hidden_dim,
            heads: self.model.heads,
            patch_size: self.model.patch_size,
            num_classes: self.dataset.classes,
            alignment_depth: self.model.alignment_depth,
            input: self.dataset.latent,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.model.encoder_dim,
            layers: self.model.encoder_layers,
            heads: self.model.encoder_heads,
            patch_size: self.model.patch_size,
            input: self.dataset.latent,
            seed: self.model.encoder_seed,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_dim: self.model.encoder_dim,
            width: self.model.disc_width,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
            eps: 1e-8,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_profile_round_trips_through_toml() {
        let cfg = RunConfig::toy();
        let s = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.model.layers, cfg.model.layers);
        assert_eq!(back.alignment.lambda, cfg.alignment.lambda);
        assert_eq!(back.dataset.seed, cfg.dataset.seed);
    }

    #[test]
    fn missing_seed_errors_naming_field() {
        let s = r#"
[dataset]
mode = "gaussian-mixture"
latent = [4, 8, 8]
classes = 4
"#;
        let err = RunConfig::from_toml_str(s).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("seed"), "error should name the field: {}", msg);
    }

    #[test]
    fn unknown_key_rejected() {
        let s = r#"
[dataset]
mode = "gaussian-mixture"
latent = [4, 8, 8]
classes = 4
seed = 1

[train]
stepz = 100
"#;
        assert!(RunConfig::from_toml_str(s).is_err());
    }

    #[test]
    fn ablation_switches() {
        let mut cfg = RunConfig::toy();
        cfg.apply_ablation("patch").unwrap();
        assert!(cfg.alignment.patch_enabled);
        assert!(!cfg.alignment.structural_enabled);
        assert!(!cfg.alignment.adversarial_enabled);
        assert!(cfg.apply_ablation("bogus").is_err());
    }

    #[test]
    fn defaults_mirror_reference_hyperparameters() {
        let cfg = RunConfig::toy();
        assert_eq!(cfg.alignment.lambda, 0.5);
        assert_eq!(cfg.alignment.beta, 0.5);
        assert_eq!(cfg.alignment.gamma, 0.05);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.beta1, 0.9);
        assert_eq!(cfg.train.beta2, 0.999);
        assert_eq!(cfg.train.weight_decay, 0.0);
        assert_eq!(cfg.sample.nfe, 250);
    }
}
