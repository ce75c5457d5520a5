//! Structured TOML configuration. Every section and key is optional; missing
//! keys take the defaults shown by `Config::default()` and
//! `configs/default.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunking::{LOSS_MIN_OVERLAP, TILE_MIN_OVERLAP};
use crate::degrade::DegradationConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::midstep::{default_t_star, GapProbeConfig};
use crate::models::ModelConfig;
use crate::nn::AdamWConfig;
use crate::scheduler::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    /// HQ side length of generated images.
    pub hq_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            val_count: 50,
            hq_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub vae_steps: usize,
    pub denoiser_steps: usize,
    pub crop: usize,
    pub vae_lr: f64,
    pub denoiser_lr: f64,
    /// Images used to estimate the latent scale.
    pub scale_samples: usize,
    /// Each phase's learning rate follows a cosine from its base value down
    /// to this fraction of it.
    pub final_lr_fraction: f64,
    /// Probability that an autoencoder step reconstructs an upscaled LQ crop
    /// instead of an HQ crop.
    pub lq_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vae_steps: 2000,
            denoiser_steps: 2000,
            crop: 64,
            vae_lr: 1e-3,
            denoiser_lr: 3e-4,
            scale_samples: 32,
            final_lr_fraction: 0.1,
            lq_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub disc_lr: f64,
    /// Micro-steps whose gradients are averaged into one optimiser update.
    pub accumulation: usize,
    /// HQ crop side used for each training sample.
    pub crop: usize,
    pub weights: LossWeights,
    /// Fixed mid-timestep; `None` uses the shipped default for the schedule
    /// kind unless `select_t_star` is set.
    pub t_star: Option<usize>,
    /// Select t* from the training pairs before fine-tuning.
    pub select_t_star: bool,
    pub candidate_stride: usize,
    /// Patch side for the chunked perceptual loss.
    pub lpips_patch: usize,
    pub lpips_min_overlap: usize,
    pub gan_min_overlap: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-5,
            disc_lr: 2e-5,
            accumulation: 4,
            crop: 64,
            weights: LossWeights::default(),
            t_star: None,
            select_t_star: false,
            candidate_stride: 5,
            lpips_patch: 224,
            lpips_min_overlap: LOSS_MIN_OVERLAP,
            gan_min_overlap: LOSS_MIN_OVERLAP,
            log_every: 1,
            checkpoint_every: 0,
            sample_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub tile: usize,
    pub min_overlap: usize,
    /// Upscale factor of the second, tiled stage.
    pub stage2_scale: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile: 128,
            min_overlap: TILE_MIN_OVERLAP,
            stage2_scale: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MidstepConfig {
    pub candidate_stride: usize,
    pub full_grid: bool,
    pub probe: GapProbeConfig,
}

impl Default for MidstepConfig {
    fn default() -> Self {
        Self {
            candidate_stride: 5,
            full_grid: false,
            probe: GapProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub scheduler: ScheduleConfig,
    pub model: ModelConfig,
    pub degradation: DegradationConfig,
    pub data: DataConfig,
    pub optimizer: AdamWConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub midstep: MidstepConfig,
    pub tiling: TilingConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.degradation.validate()?;
        self.finetune.weights.validate()?;
        if self.model.denoiser.num_steps != self.scheduler.num_steps {
            return Err(Error::Config(format!(
                "model.denoiser.num_steps ({}) must equal scheduler.num_steps ({})",
                self.model.denoiser.num_steps, self.scheduler.num_steps
            )));
        }
        if self.model.vae.latent_channels != self.model.denoiser.latent_channels {
            return Err(Error::Config(format!(
                "model.vae.latent_channels ({}) must equal model.denoiser.latent_channels ({})",
                self.model.vae.latent_channels, self.model.denoiser.latent_channels
            )));
        }
        if let Some(t) = self.finetune.t_star {
            if t > self.scheduler.num_steps {
                return Err(Error::StepOutOfRange {
                    t,
                    max: self.scheduler.num_steps,
                });
            }
        }
        if self.finetune.accumulation == 0 {
            return Err(Error::Config(
                "finetune.accumulation must be at least 1".into(),
            ));
        }
        let f = self.model.vae.downsample_factor;
        for (name, v) in [
            ("pretrain.crop", self.pretrain.crop),
            ("finetune.crop", self.finetune.crop),
        ] {
            if v == 0 || v % (2 * f * self.degradation.downscale_factor) != 0 {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a positive multiple of {}",
                    2 * f * self.degradation.downscale_factor
                )));
            }
        }
        if !self
            .data
            .hq_size
            .is_multiple_of(2 * f * self.degradation.downscale_factor)
        {
            return Err(Error::Config(
                "data.hq_size must be a multiple of 2 * vae and degradation factors".into(),
            ));
        }
        Ok(())
    }

    /// The configured t*, or the shipped default for the schedule kind.
    pub fn t_star(&self) -> usize {
        self.finetune
            .t_star
            .unwrap_or_else(|| default_t_star(self.scheduler.kind))
    }
}
