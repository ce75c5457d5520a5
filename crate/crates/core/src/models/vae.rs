use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, LoraTargets, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4,
            latent_channels: 4,
            hidden: 64,
        }
    }
}

/// Pixel-unshuffle convolutional autoencoder. The encoder is a deterministic
/// mean head; latents are multiplied by `latent_scale` so the diffusion
/// prior sees roughly unit-variance inputs.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub latent_scale: f64,
    encoder: [Conv2d; 3],
    decoder: [Conv2d; 3],
}

impl Vae {
    pub fn new(store: &mut ParamStore, config: VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        let f2 = 3 * config.downsample_factor * config.downsample_factor;
        let (h, l) = (config.hidden, config.latent_channels);
        let encoder = [
            Conv2d::same3(store, "vae.encoder.conv1", f2, h, rng)?,
            Conv2d::same3(store, "vae.encoder.conv2", h, h, rng)?,
            Conv2d::same3(store, "vae.encoder.conv3", h, l, rng)?,
        ];
        let decoder = [
            Conv2d::same3(store, "vae.decoder.conv1", l, h, rng)?,
            Conv2d::same3(store, "vae.decoder.conv2", h, h, rng)?,
            Conv2d::same3(store, "vae.decoder.conv3", h, f2, rng)?,
        ];
        Ok(Self {
            config,
            latent_scale: 1.0,
            encoder,
            decoder,
        })
    }

    pub fn factor(&self) -> usize {
        self.config.downsample_factor
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.check_rank3()?;
        let f = self.factor();
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: format!("VAE expects 3 channels and sides divisible by {f}"),
            });
        }
        Ok(())
    }

    /// `adapters = true` routes through the LoRA-tuned encoder.
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, x: Var, adapters: bool) -> Var {
        let mut h = g.pixel_unshuffle(x, self.factor());
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward_with(g, store, h, adapters);
            if i + 1 < self.encoder.len() {
                h = g.silu(h);
            }
        }
        g.scale(h, self.latent_scale)
    }

    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let mut h = g.scale(z, 1.0 / self.latent_scale);
        for (i, conv) in self.decoder.iter().enumerate() {
            h = conv.forward(g, store, h);
            if i + 1 < self.decoder.len() {
                h = g.silu(h);
            }
        }
        let img = g.pixel_shuffle(h, self.factor());
        g.tanh(img)
    }

    pub fn encode(&self, store: &ParamStore, image: &Tensor, adapters: bool) -> Result<Tensor> {
        self.check_image(image)?;
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let z = self.encode_var(&mut g, store, x, adapters);
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, store: &ParamStore, latent: &Tensor) -> Result<Tensor> {
        let (c, _, _) = latent.check_rank3()?;
        if c != self.config.latent_channels {
            return Err(Error::InvalidShape {
                shape: latent.shape().to_vec(),
                reason: format!(
                    "decoder expects {} latent channels",
                    self.config.latent_channels
                ),
            });
        }
        let mut g = Graph::inference();
        let z = g.constant(latent.clone());
        let x = self.decode_var(&mut g, store, z);
        Ok(g.value(x).clone())
    }

    pub fn encoder_convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.encoder.iter_mut().collect()
    }
}

impl LoraTargets for Vae {
    /// Only the encoder takes adapters; the decoder stays frozen.
    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.encoder_convs_mut()
    }
}
