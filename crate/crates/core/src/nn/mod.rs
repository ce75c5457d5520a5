//! Minimal differentiable building blocks for the toy networks.

mod graph;
mod kernels;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var, CHANNEL_NORM_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamEntry, ParamId, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LeCun-style uniform init gain (`Var = 1 / fan_in`).
const INIT_GAIN: f64 = 1.732_050_807_568_877_2;

/// Low-rank residual `scale * up(down(x))` attached to a frozen convolution.
///
/// `down` has the base kernel geometry with `rank` outputs; `up` is a
/// pointwise `rank -> c_out` map initialised to zero.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.insert_uniform(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in,
            INIT_GAIN,
            rng,
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            weight,
            bias: Some(bias),
            lora: None,
        })
    }

    /// Same-padded 3x3 convolution.
    pub fn same3(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn zero_init(mut self, store: &mut ParamStore) -> Result<Self> {
        store.set_value(self.weight, Tensor::zeros(store.get(self.weight).shape()))?;
        self.lora = None;
        Ok(self)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.forward_with(g, store, x, true)
    }

    /// Forward pass; `adapters = false` bypasses any injected LoRA branch.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: Var, adapters: bool) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = g.conv2d(x, w, b, self.stride, self.pad);
        match &self.lora {
            Some(l) if adapters => {
                let down = g.param(store, l.down);
                let up = g.param(store, l.up);
                let h = g.conv2d(x, down, None, self.stride, self.pad);
                let r = g.conv2d(h, up, None, 1, 0);
                let r = g.scale(r, l.scale);
                g.add(y, r)
            }
            _ => y,
        }
    }

    /// Flattened fan-in of the linear map this convolution applies per pixel.
    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn inject_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if rank == 0 || rank > self.c_out.min(self.fan_in()) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} invalid for `{}` ({} -> {})",
                self.name,
                self.fan_in(),
                self.c_out
            )));
        }
        if self.lora.is_some() {
            return Err(Error::Config(format!(
                "`{}` already has an adapter",
                self.name
            )));
        }
        let down = store.insert_uniform(
            format!("{}.lora_down", self.name),
            &[rank, self.c_in, self.kernel, self.kernel],
            self.fan_in(),
            INIT_GAIN,
            rng,
        )?;
        let up = store.insert(
            format!("{}.lora_up", self.name),
            Tensor::zeros(&[self.c_out, rank, 1, 1]),
        )?;
        self.lora = Some(LoraAdapter {
            rank,
            scale,
            down,
            up,
        });
        Ok(())
    }

    /// `W + scale * up · down` as a plain kernel.
    pub fn merged_weight(&self, store: &ParamStore) -> Tensor {
        let base = store.get(self.weight).clone();
        let Some(l) = &self.lora else { return base };
        let k = self.fan_in();
        let down = store.get(l.down).data();
        let up = store.get(l.up).data();
        let mut out = base;
        for o in 0..self.c_out {
            for j in 0..k {
                let mut acc = 0.0;
                for r in 0..l.rank {
                    acc += up[o * l.rank + r] * down[r * k + j];
                }
                out.data_mut()[o * k + j] += l.scale * acc;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert_uniform(
            format!("{name}.weight"),
            &[d_out, d_in],
            d_in,
            INIT_GAIN,
            rng,
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Models exposing named convolutions that can take LoRA adapters.
pub trait LoraTargets {
    fn convs_mut(&mut self) -> Vec<&mut Conv2d>;

    fn conv_names(&mut self) -> Vec<String> {
        self.convs_mut()
            .into_iter()
            .map(|c| c.name.clone())
            .collect()
    }
}

/// Wrap every named target with a zero-initialised low-rank adapter.
pub fn inject_lora<M: LoraTargets + ?Sized>(
    model: &mut M,
    store: &mut ParamStore,
    targets: &[String],
    rank: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut convs = model.convs_mut();
    for t in targets {
        if !convs.iter().any(|c| &c.name == t) {
            return Err(Error::UnknownTarget(t.clone()));
        }
    }
    for t in targets {
        let conv = convs
            .iter_mut()
            .find(|c| &c.name == t)
            .expect("checked above");
        conv.inject_lora(store, rank, scale, rng)?;
    }
    Ok(())
}
