//! One-pass restoration and two-stage tiled upscaling.

use std::cell::Cell;

use crate::checkpoint::CheckpointBundle;
use crate::chunking::{blend, extract, plan_chunks, BlendMode, ChunkLayout};
use crate::degrade::resize_bicubic;
use crate::error::{Error, Result};
use crate::models::{Denoiser, Vae};
use crate::nn::ParamStore;
use crate::predict::predict_one_step;
use crate::scheduler::{Schedule, ScheduleConfig};
use crate::tensor::Tensor;

/// Calls made to each stage since the last reset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub encode: usize,
    pub denoise: usize,
    pub decode: usize,
}

/// Anything that maps an LQ image to a restored one.
pub trait Restore {
    fn restore(&self, x_l: &Tensor) -> Result<Tensor>;
}

/// Returns the input unchanged.
pub struct Identity;

impl Restore for Identity {
    fn restore(&self, x_l: &Tensor) -> Result<Tensor> {
        Ok(x_l.clone())
    }
}

/// Plain bicubic upscaling, the baseline every model is compared against.
pub struct Bicubic {
    pub scale: usize,
}

impl Restore for Bicubic {
    fn restore(&self, x_l: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x_l.check_rank3()?;
        resize_bicubic(x_l, h * self.scale, w * self.scale)
    }
}

/// Encoder, denoiser at t*, one-step prediction and decoder, with call
/// counting. Without a denoiser the noise prediction is zero.
pub struct OneStep<'a> {
    pub vae: &'a Vae,
    pub store: &'a ParamStore,
    pub denoiser: Option<&'a Denoiser>,
    pub schedule: Schedule,
    pub t_star: usize,
    /// LQ to HQ upscale factor applied before encoding.
    pub scale: usize,
    counts: Cell<StageCounts>,
}

impl<'a> OneStep<'a> {
    pub fn new(
        vae: &'a Vae,
        store: &'a ParamStore,
        denoiser: Option<&'a Denoiser>,
        schedule: Schedule,
        t_star: usize,
        scale: usize,
    ) -> Result<Self> {
        if t_star > schedule.num_steps() {
            return Err(Error::StepOutOfRange {
                t: t_star,
                max: schedule.num_steps(),
            });
        }
        Ok(Self {
            vae,
            store,
            denoiser,
            schedule,
            t_star,
            scale,
            counts: Cell::new(StageCounts::default()),
        })
    }

    pub fn from_bundle(bundle: &'a CheckpointBundle) -> Result<Self> {
        let t_star = bundle
            .t_star
            .ok_or_else(|| Error::Checkpoint("bundle has no selected t*".into()))?;
        Self::new(
            &bundle.models.vae,
            &bundle.models.store,
            Some(&bundle.models.denoiser),
            Schedule::new(bundle.config.scheduler.clone())?,
            t_star,
            bundle.config.degradation.downscale_factor,
        )
    }

    /// Real autoencoder, zero noise prediction under a flow-matching
    /// schedule: every pass is a plain encode/decode round trip.
    pub fn identity_stub(vae: &'a Vae, store: &'a ParamStore, scale: usize) -> Self {
        Self::new(
            vae,
            store,
            None,
            Schedule::new(ScheduleConfig::fm()).expect("valid"),
            0,
            scale,
        )
        .expect("t = 0 is in range")
    }

    pub fn counts(&self) -> StageCounts {
        self.counts.get()
    }

    pub fn reset_counts(&self) {
        self.counts.set(StageCounts::default());
    }

    fn bump(&self, f: impl FnOnce(&mut StageCounts)) {
        let mut c = self.counts.get();
        f(&mut c);
        self.counts.set(c);
    }

    /// Encode, predict once at t*, decode; input and output share size.
    pub fn process(&self, x: &Tensor) -> Result<Tensor> {
        let z_l = self.vae.encode(self.store, x, true)?;
        self.bump(|c| c.encode += 1);
        let eps = match self.denoiser {
            Some(d) => d.denoise(self.store, &z_l, self.t_star, None)?,
            None => Tensor::zeros(z_l.shape()),
        };
        self.bump(|c| c.denoise += 1);
        let z_p = predict_one_step(&self.schedule, &z_l, &eps, self.t_star)?;
        let out = self.vae.decode(self.store, &z_p)?;
        self.bump(|c| c.decode += 1);
        Ok(out)
    }

    fn check_lq(&self, x_l: &Tensor) -> Result<(usize, usize)> {
        let (_, h, w) = x_l.check_rank3()?;
        let g = 2 * self.vae.factor();
        if !(h * self.scale).is_multiple_of(g) || !(w * self.scale).is_multiple_of(g) {
            return Err(Error::InvalidShape {
                shape: x_l.shape().to_vec(),
                reason: format!("upscaled sides must be divisible by {g}"),
            });
        }
        Ok((h, w))
    }
}

impl Restore for OneStep<'_> {
    /// Bicubic upscale by `scale`, then one pass through every stage.
    fn restore(&self, x_l: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_lq(x_l)?;
        let up = resize_bicubic(x_l, h * self.scale, w * self.scale)?;
        self.process(&up)
    }
}

pub fn restore(bundle: &CheckpointBundle, x_l: &Tensor) -> Result<Tensor> {
    OneStep::from_bundle(bundle)?.restore(x_l)
}

#[derive(Clone, Debug)]
pub struct TiledOutput {
    pub image: Tensor,
    pub stage1: Tensor,
    pub layout: ChunkLayout,
}

/// Stage 1 restores the whole image; stage 2 upscales that result by
/// `stage2_scale`, processes overlapping tiles independently and blends them.
pub fn tiled_restore_with(
    model: &OneStep,
    x_l: &Tensor,
    tile: usize,
    min_overlap: usize,
    stage2_scale: usize,
    blend_mode: BlendMode,
) -> Result<TiledOutput> {
    let g = 2 * model.vae.factor();
    if tile == 0 || !tile.is_multiple_of(g) {
        return Err(Error::Layout(format!(
            "tile {tile} must be a positive multiple of {g}"
        )));
    }
    if stage2_scale == 0 {
        return Err(Error::Config("stage-2 scale must be at least 1".into()));
    }
    let stage1 = model.restore(x_l)?;
    let (_, h, w) = stage1.check_rank3()?;
    let up = resize_bicubic(&stage1, h * stage2_scale, w * stage2_scale)?;
    let layout = plan_chunks((h * stage2_scale, w * stage2_scale), tile, min_overlap)?
        .with_blend(blend_mode);
    let tiles = extract(&up, &layout)?;
    let processed = tiles
        .iter()
        .map(|t| model.process(t))
        .collect::<Result<Vec<_>>>()?;
    let image = blend(&processed, &layout)?;
    Ok(TiledOutput {
        image,
        stage1,
        layout,
    })
}

pub fn tiled_restore(
    bundle: &CheckpointBundle,
    x_l: &Tensor,
    tile: usize,
    min_overlap: usize,
) -> Result<Tensor> {
    let model = OneStep::from_bundle(bundle)?;
    Ok(tiled_restore_with(
        &model,
        x_l,
        tile,
        min_overlap,
        bundle.config.tiling.stage2_scale,
        BlendMode::Feather,
    )?
    .image)
}

fn is_boundary(starts: &[usize], i: usize) -> bool {
    starts.iter().skip(1).any(|&s| s == i)
}

/// Largest first difference across a tile start boundary, divided by the
/// median absolute first difference away from boundaries.
pub fn seam_statistic(image: &Tensor, layout: &ChunkLayout) -> Result<f64> {
    let (c, h, w) = image.check_rank3()?;
    if (h, w) != layout.image_size {
        return Err(Error::Layout("image does not match layout".into()));
    }
    let mut cross: f64 = 0.0;
    let mut interior = Vec::with_capacity(2 * c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 1..w {
                let d = (image.at(ch, y, x) - image.at(ch, y, x - 1)).abs();
                if is_boundary(&layout.starts_x, x) {
                    cross = cross.max(d);
                } else {
                    interior.push(d);
                }
            }
        }
        for y in 1..h {
            for x in 0..w {
                let d = (image.at(ch, y, x) - image.at(ch, y - 1, x)).abs();
                if is_boundary(&layout.starts_y, y) {
                    cross = cross.max(d);
                } else {
                    interior.push(d);
                }
            }
        }
    }
    if interior.is_empty() {
        return Err(Error::Empty("interior differences"));
    }
    interior.sort_by(f64::total_cmp);
    let n = interior.len();
    let median = if n % 2 == 1 {
        interior[n / 2]
    } else {
        0.5 * (interior[n / 2 - 1] + interior[n / 2])
    };
    Ok(cross / median.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DenoiserConfig, ModelConfig, Models, VaeConfig};
    use crate::tensor::seeded_rng;

    fn tiny() -> Models {
        Models::new(
            ModelConfig {
                vae: VaeConfig {
                    hidden: 8,
                    ..VaeConfig::default()
                },
                denoiser: DenoiserConfig {
                    hidden: 8,
                    ..DenoiserConfig::default()
                },
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn restore_shape_counts_and_determinism() {
        let m = tiny();
        let s = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let one = OneStep::new(&m.vae, &m.store, Some(&m.denoiser), s, 195, 4).unwrap();
        let x = Tensor::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut seeded_rng(1));
        let a = one.restore(&x).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(
            one.counts(),
            StageCounts {
                encode: 1,
                denoise: 1,
                decode: 1
            }
        );
        assert_eq!(a, one.restore(&x).unwrap());
        assert!(one.restore(&Tensor::zeros(&[3, 7, 8])).is_err());
    }

    #[test]
    fn tiled_counts_and_single_tile_equivalence() {
        let m = tiny();
        let s = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let one = OneStep::new(&m.vae, &m.store, Some(&m.denoiser), s, 195, 4).unwrap();
        let x = Tensor::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut seeded_rng(2));
        let out = tiled_restore_with(&one, &x, 64, 8, 2, BlendMode::Feather).unwrap();
        assert_eq!(out.layout.num_patches(), 1);
        let plain = one
            .process(&resize_bicubic(&out.stage1, 64, 64).unwrap())
            .unwrap();
        assert!(out.image.max_abs_diff(&plain) < 1e-6);

        one.reset_counts();
        let out = tiled_restore_with(&one, &x, 32, 8, 2, BlendMode::Feather).unwrap();
        let n = out.layout.num_patches();
        assert_eq!(n, 9);
        assert_eq!(
            one.counts(),
            StageCounts {
                encode: 1 + n,
                denoise: 1 + n,
                decode: 1 + n
            }
        );
        assert!(tiled_restore_with(&one, &x, 30, 8, 2, BlendMode::Feather).is_err());
    }

    #[test]
    fn seam_statistic_flags_steps() {
        let layout = plan_chunks((16, 16), 8, 0).unwrap();
        let smooth = Tensor::from_fn3(1, 16, 16, |_, y, x| 0.01 * (x + y) as f64);
        let stepped = Tensor::from_fn3(1, 16, 16, |_, y, x| {
            0.01 * (x + y) as f64 + if x >= 8 { 0.5 } else { 0.0 }
        });
        let a = seam_statistic(&smooth, &layout).unwrap();
        let b = seam_statistic(&stepped, &layout).unwrap();
        assert!((a - 1.0).abs() < 1e-9);
        assert!(b > 10.0);
    }
}
