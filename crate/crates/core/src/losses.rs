//! Training objectives. Every loss has a differentiable `*_var` form recorded
//! on a [`Graph`] and, where useful, a plain value form.
//!
//! The chunked losses take a [`ChunkLayout`]; a single-patch layout reduces
//! them to their non-chunked versions.

use serde::{Deserialize, Serialize};

use crate::chunking::ChunkLayout;
use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::scheduler::Schedule;
use crate::tensor::Tensor;

/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 2.0,
            lambda3: 5.0,
            lambda4: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted generator-side loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub lan: f64,
    pub mse: f64,
    pub oc_lpips: f64,
    pub gan_g: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lan: f64,
    pub mse: f64,
    pub oc_lpips: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,lan,mse,oc_lpips,gan_g,gan_d,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.lan, self.mse, self.oc_lpips, self.gan_g, self.gan_d, self.total
        )
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        lan: c.lan,
        mse: c.mse,
        oc_lpips: c.oc_lpips,
        gan_g: c.gan_g,
        gan_d: 0.0,
        total: w.lambda1 * c.lan + w.lambda2 * c.mse + w.lambda3 * c.oc_lpips + w.lambda4 * c.gan_g,
    }
}

/// Latent refinement loss: MSE between the LQ latent and the noisy HQ latent
/// at `t_star`.
pub fn lan_loss(
    schedule: &Schedule,
    z_l: &Tensor,
    z_h: &Tensor,
    eps: &Tensor,
    t_star: usize,
) -> Result<f64> {
    z_l.same_shape(z_h)?;
    let target = schedule.add_noise(z_h, eps, t_star)?;
    z_l.mse(&target)
}

pub fn lan_loss_var(
    g: &mut Graph,
    schedule: &Schedule,
    z_l: Var,
    z_h: Var,
    eps: &Tensor,
    t_star: usize,
) -> Result<Var> {
    g.value(z_l).same_shape(g.value(z_h))?;
    g.value(z_h).same_shape(eps)?;
    let (a, b) = schedule.mix_weights(t_star)?;
    let clean = g.scale(z_h, a);
    let noise = g.constant(eps.scale(b));
    let target = g.add(clean, noise);
    Ok(g.mse(z_l, target))
}

/// Multi-layer feature pyramid used by the perceptual distance.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;
}

/// Scores an image patch with a realness probability in `(0, 1)`, as a
/// one-element tensor.
pub trait PatchCritic {
    fn realness(&self, g: &mut Graph, patch: Var) -> Var;
}

/// Perceptual distance: per layer, the spatial mean of the channel-summed
/// squared difference of unit-normalised features; averaged over layers.
pub fn perceptual_distance_var(
    g: &mut Graph,
    embedder: &dyn FeatureExtractor,
    a: Var,
    b: Var,
) -> Var {
    let fa = embedder.features(g, a);
    let fb = embedder.features(g, b);
    assert!(
        !fa.is_empty() && fa.len() == fb.len(),
        "embedder must return matching layers"
    );
    let layers = fa.len() as f64;
    let mut acc: Option<Var> = None;
    for (&la, &lb) in fa.iter().zip(&fb) {
        let channels = g.value(la).shape()[0] as f64;
        let na = g.channel_normalize(la);
        let nb = g.channel_normalize(lb);
        let d = g.mse(na, nb);
        let d = g.scale(d, channels / layers);
        acc = Some(match acc {
            None => d,
            Some(s) => g.add(s, d),
        });
    }
    acc.expect("at least one layer")
}

fn check_pair(g: &Graph, a: Var, b: Var, layout: &ChunkLayout) -> Result<()> {
    g.value(a).same_shape(g.value(b))?;
    let (_, h, w) = g.value(a).check_rank3()?;
    if (h, w) != layout.image_size {
        return Err(Error::Layout(format!(
            "image {h}x{w} does not match layout {:?}",
            layout.image_size
        )));
    }
    Ok(())
}

fn mean_of(g: &mut Graph, terms: Vec<Var>) -> Var {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().expect("non-empty");
    let sum = it.fold(first, |acc, t| g.add(acc, t));
    g.scale(sum, 1.0 / n)
}

/// Overlap-chunked perceptual loss: mean of per-patch distances.
pub fn oc_lpips_var(
    g: &mut Graph,
    embedder: &dyn FeatureExtractor,
    x_p: Var,
    x_h: Var,
    layout: &ChunkLayout,
) -> Result<Var> {
    check_pair(g, x_p, x_h, layout)?;
    let p = layout.patch_size;
    let mut terms = Vec::with_capacity(layout.num_patches());
    for (y, x) in layout.origins() {
        let (pa, pb) = if layout.num_patches() == 1 && (p, p) == layout.image_size {
            (x_p, x_h)
        } else {
            (g.crop(x_p, y, x, p, p), g.crop(x_h, y, x, p, p))
        };
        terms.push(perceptual_distance_var(g, embedder, pa, pb));
    }
    let out = mean_of(g, terms);
    if !g.scalar(out).is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: "perceptual distance is not finite".into(),
        });
    }
    Ok(out)
}

pub fn oc_lpips(
    x_p: &Tensor,
    x_h: &Tensor,
    embedder: &dyn FeatureExtractor,
    layout: &ChunkLayout,
) -> Result<f64> {
    let mut g = Graph::inference();
    let a = g.constant(x_p.clone());
    let b = g.constant(x_h.clone());
    let v = oc_lpips_var(&mut g, embedder, a, b, layout)?;
    Ok(g.scalar(v))
}

fn patches(g: &mut Graph, x: Var, layout: &ChunkLayout) -> Vec<Var> {
    let p = layout.patch_size;
    if layout.num_patches() == 1 && (p, p) == layout.image_size {
        return vec![x];
    }
    layout
        .origins()
        .map(|(y, xo)| g.crop(x, y, xo, p, p))
        .collect()
}

fn clamped_prob(g: &mut Graph, critic: &dyn PatchCritic, patch: Var) -> Result<Var> {
    let d = critic.realness(g, patch);
    let p = g.clamp(d, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let v = g.scalar(p);
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Internal(format!(
            "discriminator probability {v} outside (0, 1)"
        )));
    }
    Ok(p)
}

/// Mean over chunks of `-ln D(patch)` (`real = true`) or `-ln(1 - D(patch))`.
fn chunked_log_term(
    g: &mut Graph,
    critic: &dyn PatchCritic,
    x: Var,
    layout: &ChunkLayout,
    real: bool,
) -> Result<Var> {
    let mut terms = Vec::new();
    for patch in patches(g, x, layout) {
        let p = clamped_prob(g, critic, patch)?;
        let q = if real {
            p
        } else {
            let one = g.constant(Tensor::full(&[1], 1.0));
            g.sub(one, p)
        };
        let l = g.ln(q);
        terms.push(g.scale(l, -1.0));
    }
    Ok(mean_of(g, terms))
}

/// Logistic discriminator loss; both images enter as constants so only the
/// critic's parameters receive gradients.
pub fn oc_gan_d_loss_var(
    g: &mut Graph,
    critic: &dyn PatchCritic,
    x_h: &Tensor,
    x_p: &Tensor,
    layout: &ChunkLayout,
) -> Result<Var> {
    let h = g.constant(x_h.clone());
    let p = g.constant(x_p.clone());
    check_pair(g, h, p, layout)?;
    let real = chunked_log_term(g, critic, h, layout, true)?;
    let fake = chunked_log_term(g, critic, p, layout, false)?;
    Ok(g.add(real, fake))
}

/// Non-saturating generator loss `-mean ln D(patch)`.
pub fn oc_gan_g_loss_var(
    g: &mut Graph,
    critic: &dyn PatchCritic,
    x_p: Var,
    layout: &ChunkLayout,
) -> Result<Var> {
    let (_, h, w) = g.value(x_p).check_rank3()?;
    if (h, w) != layout.image_size {
        return Err(Error::Layout(format!(
            "image {h}x{w} does not match layout {:?}",
            layout.image_size
        )));
    }
    chunked_log_term(g, critic, x_p, layout, true)
}

pub fn oc_gan_d_loss(
    x_h: &Tensor,
    x_p: &Tensor,
    critic: &dyn PatchCritic,
    layout: &ChunkLayout,
) -> Result<f64> {
    let mut g = Graph::inference();
    let v = oc_gan_d_loss_var(&mut g, critic, x_h, x_p, layout)?;
    Ok(g.scalar(v))
}

pub fn oc_gan_g_loss(x_p: &Tensor, critic: &dyn PatchCritic, layout: &ChunkLayout) -> Result<f64> {
    let mut g = Graph::inference();
    let x = g.constant(x_p.clone());
    let v = oc_gan_g_loss_var(&mut g, critic, x, layout)?;
    Ok(g.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::ScheduleConfig;
    use crate::tensor::seeded_rng;

    struct Constant(f64);

    impl PatchCritic for Constant {
        fn realness(&self, g: &mut Graph, _patch: Var) -> Var {
            g.constant(Tensor::full(&[1], self.0))
        }
    }

    /// Real patches score high, fake patches (all values below -0.5) low.
    struct Oracle;

    impl PatchCritic for Oracle {
        fn realness(&self, g: &mut Graph, patch: Var) -> Var {
            let real = g.value(patch).mean() > -0.5;
            g.constant(Tensor::full(&[1], if real { 1.0 - 1e-6 } else { 1e-6 }))
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn gan_analytic_anchors() {
        let layout = crate::chunking::plan_chunks((16, 16), 8, 2).unwrap();
        let x = Tensor::zeros(&[3, 16, 16]);
        let d = oc_gan_d_loss(&x, &x, &Constant(0.5), &layout).unwrap();
        assert!((d - 1.386_294_361_1).abs() < 1e-6);
        let gl = oc_gan_g_loss(&x, &Constant(0.5), &layout).unwrap();
        assert!((gl - 0.693_147_180_6).abs() < 1e-6);

        let fake = Tensor::full(&[3, 16, 16], -1.0);
        let d = oc_gan_d_loss(&x, &fake, &Oracle, &layout).unwrap();
        assert!(d < 1e-5);
        let gl = oc_gan_g_loss(&x, &Constant(1.0 - 1e-6), &layout).unwrap();
        assert!(gl < 1e-5);
    }

    #[test]
    fn total_loss_uses_default_weights() {
        let w = LossWeights::default();
        let b = total_loss(&LossComponents::default(), &w);
        assert_eq!(b.total, 0.0);
        let ones = LossComponents {
            lan: 1.0,
            mse: 1.0,
            oc_lpips: 1.0,
            gan_g: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).total, 12.5);
    }

    #[test]
    fn lan_loss_anchors() {
        let s = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let mut rng = seeded_rng(1);
        let z_h = Tensor::randn(&[4, 4, 4], &mut rng);
        let eps = Tensor::randn(&[4, 4, 4], &mut rng);
        let target = s.add_noise(&z_h, &eps, 195).unwrap();
        assert_eq!(lan_loss(&s, &target, &z_h, &eps, 195).unwrap(), 0.0);
        let shifted = target.map(|v| v + 0.1);
        assert!((lan_loss(&s, &shifted, &z_h, &eps, 195).unwrap() - 0.01).abs() < 1e-12);
        let neg = target.map(|v| v - 0.1);
        assert!(
            (lan_loss(&s, &neg, &z_h, &eps, 195).unwrap()
                - lan_loss(&s, &shifted, &z_h, &eps, 195).unwrap())
            .abs()
                < 1e-15
        );
        assert!(lan_loss(&s, &Tensor::zeros(&[4, 4, 5]), &z_h, &eps, 195).is_err());
    }
}
