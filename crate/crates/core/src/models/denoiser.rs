use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, LoraTargets, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Largest accepted step index.
    pub num_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: 32,
            time_dim: 32,
            cond_dim: 8,
            num_steps: 999,
        }
    }
}

/// Two-level residual U-shaped noise predictor conditioned on a sinusoidal
/// step embedding and a single learned condition vector.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub cond: ParamId,
    time1: Linear,
    time2: Linear,
    cond_proj: Linear,
    mid_proj: Linear,
    conv_in: Conv2d,
    enc_a: Conv2d,
    enc_b: Conv2d,
    down: Conv2d,
    mid_a: Conv2d,
    mid_b: Conv2d,
    up: Conv2d,
    merge: Conv2d,
    dec_a: Conv2d,
    dec_b: Conv2d,
    conv_out: Conv2d,
}

/// Sinusoidal embedding of an integer step.
pub fn step_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    Tensor::from_vec(&[dim], v).expect("embedding")
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let (l, h) = (config.latent_channels, config.hidden);
        let p = "denoiser";
        let cond = store.insert(format!("{p}.cond"), Tensor::randn(&[config.cond_dim], rng))?;
        Ok(Self {
            cond,
            time1: Linear::new(store, &format!("{p}.time1"), config.time_dim, h, rng)?,
            time2: Linear::new(store, &format!("{p}.time2"), h, h, rng)?,
            cond_proj: Linear::new(store, &format!("{p}.cond_proj"), config.cond_dim, h, rng)?,
            mid_proj: Linear::new(store, &format!("{p}.mid_proj"), h, 2 * h, rng)?,
            conv_in: Conv2d::same3(store, &format!("{p}.conv_in"), l, h, rng)?,
            enc_a: Conv2d::same3(store, &format!("{p}.enc_a"), h, h, rng)?,
            enc_b: Conv2d::same3(store, &format!("{p}.enc_b"), h, h, rng)?,
            down: Conv2d::same3(store, &format!("{p}.down"), h, 2 * h, rng)?,
            mid_a: Conv2d::same3(store, &format!("{p}.mid_a"), 2 * h, 2 * h, rng)?,
            mid_b: Conv2d::same3(store, &format!("{p}.mid_b"), 2 * h, 2 * h, rng)?,
            up: Conv2d::same3(store, &format!("{p}.up"), 2 * h, h, rng)?,
            merge: Conv2d::same3(store, &format!("{p}.merge"), 2 * h, h, rng)?,
            dec_a: Conv2d::same3(store, &format!("{p}.dec_a"), h, h, rng)?,
            dec_b: Conv2d::same3(store, &format!("{p}.dec_b"), h, h, rng)?,
            conv_out: Conv2d::same3(store, &format!("{p}.conv_out"), h, l, rng)?
                .zero_init(store)?,
            config,
        })
    }

    fn residual(g: &mut Graph, store: &ParamStore, x: Var, a: &Conv2d, b: &Conv2d) -> Var {
        let h = g.silu(x);
        let h = a.forward(g, store, h);
        let h = g.silu(h);
        let h = b.forward(g, store, h);
        g.add(x, h)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.config.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.config.num_steps,
            });
        }
        Ok(())
    }

    /// Prediction for latent `z` at step `t`; `cond = None` uses the learned
    /// condition vector. Latent sides must be even.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Var {
        let te = g.constant(step_embedding(t, self.config.time_dim));
        let te = self.time1.forward(g, store, te);
        let te = g.silu(te);
        let te = self.time2.forward(g, store, te);
        let c = match cond {
            Some(c) => g.constant(c.clone()),
            None => g.param(store, self.cond),
        };
        let ce = self.cond_proj.forward(g, store, c);
        let emb = g.add(te, ce);

        let h0 = self.conv_in.forward(g, store, z);
        let h0 = g.add_channel(h0, emb);
        let h1 = Self::residual(g, store, h0, &self.enc_a, &self.enc_b);

        let d = g.avg_pool2(h1);
        let d = self.down.forward(g, store, d);
        let act = g.silu(emb);
        let me = self.mid_proj.forward(g, store, act);
        let d = g.add_channel(d, me);
        let d = Self::residual(g, store, d, &self.mid_a, &self.mid_b);

        let u = g.upsample2(d);
        let u = self.up.forward(g, store, u);
        let u = g.concat(u, h1);
        let u = self.merge.forward(g, store, u);
        let u = Self::residual(g, store, u, &self.dec_a, &self.dec_b);
        let u = g.silu(u);
        self.conv_out.forward(g, store, u)
    }

    pub fn denoise(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_step(t)?;
        let (c, h, w) = z.check_rank3()?;
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: z.shape().to_vec(),
                reason: format!(
                    "denoiser expects {} channels and even sides",
                    self.config.latent_channels
                ),
            });
        }
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, store, zv, t, cond);
        Ok(g.value(out).clone())
    }
}

impl LoraTargets for Denoiser {
    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        vec![
            &mut self.conv_in,
            &mut self.enc_a,
            &mut self.enc_b,
            &mut self.down,
            &mut self.mid_a,
            &mut self.mid_b,
            &mut self.up,
            &mut self.merge,
            &mut self.dec_a,
            &mut self.dec_b,
            &mut self.conv_out,
        ]
    }
}
