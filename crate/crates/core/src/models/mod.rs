//! Toy stand-ins for the autoencoder, the denoising backbone, the patch
//! discriminator and the perceptual embedder.

mod critic;
mod denoiser;
mod vae;

pub use critic::{Bound, Discriminator, DiscriminatorConfig, PerceptualEmbedder, EMBEDDER_SEED};
pub use denoiser::{step_embedding, Denoiser, DenoiserConfig};
pub use vae::{Vae, VaeConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{inject_lora, LoraTargets, ParamStore};
use crate::tensor::{derive_seed, seeded_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub vae_rank: usize,
    pub denoiser_rank: usize,
    pub scale: f64,
    /// Empty means every encoder convolution.
    pub vae_targets: Vec<String>,
    /// Empty means every denoiser convolution wide enough for the rank.
    pub denoiser_targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            vae_rank: 4,
            denoiser_rank: 8,
            scale: 1.0,
            vae_targets: Vec::new(),
            denoiser_targets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
    pub discriminator: DiscriminatorConfig,
    pub lora: LoraConfig,
}

/// All trainable networks sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vae: Vae,
    pub denoiser: Denoiser,
    pub disc: Discriminator,
}

/// Names of `model`'s convolutions that can take a rank-`rank` adapter.
fn default_targets<M: LoraTargets>(model: &mut M, rank: usize) -> Vec<String> {
    model
        .convs_mut()
        .into_iter()
        .filter(|c| rank <= c.c_out.min(c.fan_in()))
        .map(|c| c.name.clone())
        .collect()
}

impl Models {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let vae = Vae::new(
            &mut store,
            config.vae.clone(),
            &mut seeded_rng(derive_seed(seed, "init.vae", 0)),
        )?;
        let denoiser = Denoiser::new(
            &mut store,
            config.denoiser.clone(),
            &mut seeded_rng(derive_seed(seed, "init.denoiser", 0)),
        )?;
        let disc = Discriminator::new(
            &mut store,
            config.discriminator.clone(),
            &mut seeded_rng(derive_seed(seed, "init.disc", 0)),
        )?;
        Ok(Self {
            config,
            store,
            vae,
            denoiser,
            disc,
        })
    }

    pub fn has_adapters(&self) -> bool {
        self.store
            .entries()
            .iter()
            .any(|e| e.name.contains(".lora_"))
    }

    /// Inject zero-initialised adapters into the encoder and the denoiser and
    /// freeze everything outside them and the discriminator.
    pub fn inject_adapters(&mut self, seed: u64) -> Result<()> {
        let lc = self.config.lora.clone();
        let mut rng = seeded_rng(derive_seed(seed, "init.lora", 0));
        let vae_targets = if lc.vae_targets.is_empty() {
            default_targets(&mut self.vae, lc.vae_rank)
        } else {
            lc.vae_targets.clone()
        };
        let den_targets = if lc.denoiser_targets.is_empty() {
            default_targets(&mut self.denoiser, lc.denoiser_rank)
        } else {
            lc.denoiser_targets.clone()
        };
        inject_lora(
            &mut self.vae,
            &mut self.store,
            &vae_targets,
            lc.vae_rank,
            lc.scale,
            &mut rng,
        )?;
        inject_lora(
            &mut self.denoiser,
            &mut self.store,
            &den_targets,
            lc.denoiser_rank,
            lc.scale,
            &mut rng,
        )?;
        self.store
            .set_trainable(|name| name.contains(".lora_") || name.starts_with("disc."));
        Ok(())
    }
}
