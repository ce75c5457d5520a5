use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{FeatureExtractor, PatchCritic};
use crate::nn::{Conv2d, Graph, Linear, ParamStore, Var};
use crate::tensor::{seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub patch: usize,
    pub hidden: usize,
    /// Largest input side scored without chunking.
    pub native_input: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            hidden: 16,
            native_input: 224,
        }
    }
}

/// Patch-embedding realness classifier producing one probability per input.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    embed: Conv2d,
    conv: Conv2d,
    head: Linear,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        config: DiscriminatorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = config.hidden;
        Ok(Self {
            embed: Conv2d::new(
                store,
                "disc.embed",
                3,
                h,
                config.patch,
                config.patch,
                0,
                rng,
            )?,
            conv: Conv2d::new(store, "disc.conv", h, 2 * h, 3, 2, 1, rng)?,
            head: Linear::new(store, "disc.head", 2 * h, 1, rng)?,
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.embed.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv.forward(g, store, h);
        let h = g.silu(h);
        let pooled = g.global_avg_pool(h);
        let logit = self.head.forward(g, store, pooled);
        g.sigmoid(logit)
    }

    pub fn score(&self, store: &ParamStore, image: &Tensor) -> f64 {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let p = self.forward(&mut g, store, x);
        g.scalar(p)
    }
}

/// A model paired with the parameter store it reads from.
#[derive(Clone, Copy)]
pub struct Bound<'a, M> {
    pub model: &'a M,
    pub store: &'a ParamStore,
}

impl<'a, M> Bound<'a, M> {
    pub fn new(model: &'a M, store: &'a ParamStore) -> Self {
        Self { model, store }
    }
}

impl PatchCritic for Bound<'_, Discriminator> {
    fn realness(&self, g: &mut Graph, patch: Var) -> Var {
        self.model.forward(g, self.store, patch)
    }
}

/// Seed of the fixed perceptual feature pyramid.
pub const EMBEDDER_SEED: u64 = 0x0e3b_edd0;

/// Fixed random-weight three-level convolutional feature pyramid standing in
/// for a pretrained perceptual network.
#[derive(Clone, Debug)]
pub struct PerceptualEmbedder {
    store: ParamStore,
    layers: Vec<Conv2d>,
}

impl PerceptualEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let spec = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| {
                Conv2d::new(
                    &mut store,
                    &format!("embedder.conv{}", i + 1),
                    ci,
                    co,
                    3,
                    s,
                    1,
                    &mut rng,
                )
                .expect("fresh store")
            })
            .collect();
        store.set_trainable(|_| false);
        Self { store, layers }
    }
}

impl Default for PerceptualEmbedder {
    fn default() -> Self {
        Self::new(EMBEDDER_SEED)
    }
}

impl FeatureExtractor for PerceptualEmbedder {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        // The embedder owns a separate store, so its weights enter the graph
        // as constants rather than parameters.
        for layer in &self.layers {
            let w = g.constant(self.store.get(layer.weight).clone());
            let b = layer.bias.map(|b| g.constant(self.store.get(b).clone()));
            h = g.conv2d(h, w, b, layer.stride, layer.pad);
            h = g.silu(h);
            out.push(h);
        }
        out
    }
}
