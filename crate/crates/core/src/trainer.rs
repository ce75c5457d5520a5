//! Two-stage toy pre-training and one-step fine-tuning.
//!
//! Training works on aligned square crops. The LQ image of every pair is
//! bicubic-upscaled to HQ size once, so `(x_L, x_H)` crops share coordinates.
//! A fine-tune step is one micro-batch; optimiser updates happen every
//! `finetune.accumulation` steps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::CheckpointBundle;
use crate::chunking::{plan_chunks, ChunkLayout};
use crate::config::Config;
use crate::data::{save_png, Pair};
use crate::degrade::resize_bicubic;
use crate::error::{Error, Result};
use crate::infer::OneStep;
use crate::losses::{
    lan_loss_var, oc_gan_d_loss_var, oc_gan_g_loss_var, oc_lpips_var, LossBreakdown, LossWeights,
};
use crate::metrics::{evaluate, EvalReport};
use crate::midstep::{candidate_grid, precompute_mid_timestep, MidTimestepReport};
use crate::models::{Bound, Models, PerceptualEmbedder};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamId};
use crate::predict::predict_one_step_var;
use crate::scheduler::Schedule;
use crate::tensor::{derive_seed, seeded_rng, Tensor};

pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_FINETUNE: &str = "finetune";

/// Training pairs with the LQ side upscaled to HQ resolution.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub hq: Vec<Tensor>,
    pub lq_up: Vec<Tensor>,
    /// Crop origins are multiples of this so LQ pixels stay aligned.
    pub align: usize,
}

impl TrainSet {
    pub fn new(pairs: &[Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut hq = Vec::with_capacity(pairs.len());
        let mut lq_up = Vec::with_capacity(pairs.len());
        let mut align = 1;
        for p in pairs {
            let (_, h, w) = p.hq.check_rank3()?;
            let (_, lh, _) = p.lq.check_rank3()?;
            if lh == 0 || h % lh != 0 {
                return Err(Error::Config(format!(
                    "{}: HQ size is not a multiple of the LQ size",
                    p.name
                )));
            }
            align = align.max(h / lh);
            lq_up.push(resize_bicubic(&p.lq, h, w)?);
            hq.push(p.hq.clone());
        }
        Ok(Self { hq, lq_up, align })
    }

    pub fn len(&self) -> usize {
        self.hq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hq.is_empty()
    }

    /// Random image and aligned crop origin; returns `(x_L, x_H)` crops.
    pub fn sample(&self, rng: &mut impl Rng, size: usize) -> Result<(Tensor, Tensor)> {
        let i = rng.random_range(0..self.len());
        let (_, h, w) = self.hq[i].dims3();
        if size > h || size > w {
            return Err(Error::Config(format!("crop {size} exceeds image {h}x{w}")));
        }
        let y = rng.random_range(0..=(h - size) / self.align) * self.align;
        let x = rng.random_range(0..=(w - size) / self.align) * self.align;
        Ok((
            self.lq_up[i].crop(y, x, size, size)?,
            self.hq[i].crop(y, x, size, size)?,
        ))
    }
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step: step as usize,
            what: format!("{what} is {v}"),
        })
    }
}

fn check_grads(step: u64, grads: &[(ParamId, Tensor)]) -> Result<()> {
    if grads.iter().all(|(_, g)| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            step: step as usize,
            what: "non-finite gradient".into(),
        })
    }
}

/// Cosine decay from `base` at `i = 0` to `base * floor` at the last step.
pub fn cosine_lr(base: f64, floor: f64, i: u64, len: usize) -> f64 {
    if len <= 1 {
        return base;
    }
    let frac = i as f64 / (len - 1) as f64;
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainPhase {
    Vae,
    Denoiser,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainStep {
    pub step: u64,
    pub phase: PretrainPhase,
    pub loss: f64,
}

/// VAE reconstruction followed by denoiser training on frozen HQ latents.
/// `bundle.step` counts completed steps over both phases.
pub struct Pretrainer {
    pub bundle: CheckpointBundle,
    schedule: Schedule,
}

impl Pretrainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let models = Models::new(config.model.clone(), config.seed)?;
        Self::resume(CheckpointBundle::new(config, models, STAGE_PRETRAIN))
    }

    pub fn resume(bundle: CheckpointBundle) -> Result<Self> {
        if bundle.stage != STAGE_PRETRAIN {
            return Err(Error::Checkpoint(format!(
                "cannot resume pre-training from a `{}` bundle",
                bundle.stage
            )));
        }
        let schedule = Schedule::new(bundle.config.scheduler.clone())?;
        Ok(Self { bundle, schedule })
    }

    pub fn total_steps(&self) -> u64 {
        let p = &self.bundle.config.pretrain;
        (p.vae_steps + p.denoiser_steps) as u64
    }

    pub fn is_done(&self) -> bool {
        self.bundle.step >= self.total_steps()
    }

    /// Std of frozen HQ latents over random crops, with unit scale.
    fn estimate_latent_scale(&mut self, data: &TrainSet) -> Result<f64> {
        let cfg = &self.bundle.config;
        let mut rng = seeded_rng(derive_seed(cfg.seed, "pretrain.scale", 0));
        let models = &mut self.bundle.models;
        models.vae.latent_scale = 1.0;
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.pretrain.scale_samples.max(1) {
            let (_, hq) = data.sample(&mut rng, cfg.pretrain.crop)?;
            let z = models.vae.encode(&models.store, &hq, false)?;
            s += z.sum();
            s2 += z.sum_sq();
            n += z.len() as f64;
        }
        let var = s2 / n - (s / n).powi(2);
        let std = var.max(0.0).sqrt();
        if std.is_nan() || std <= 1e-6 {
            return Err(Error::Numerical {
                step: self.bundle.step as usize,
                what: format!("latent std {std} is degenerate"),
            });
        }
        Ok(1.0 / std)
    }

    pub fn step(&mut self, data: &TrainSet) -> Result<PretrainStep> {
        if self.is_done() {
            return Err(Error::Config("pre-training is already complete".into()));
        }
        let step = self.bundle.step;
        let cfg = self.bundle.config.clone();
        let mut rng = seeded_rng(derive_seed(cfg.seed, "pretrain.step", step));
        let (lq, hq) = data.sample(&mut rng, cfg.pretrain.crop)?;
        let vae_phase = step < cfg.pretrain.vae_steps as u64;
        // The autoencoder also sees upscaled LQ crops so that blurry inputs
        // survive the round trip; the denoiser prior sees HQ latents only.
        let vae_input = if rng.random_bool(cfg.pretrain.lq_fraction) {
            lq
        } else {
            hq.clone()
        };

        if !vae_phase && step == cfg.pretrain.vae_steps as u64 {
            let scale = self.estimate_latent_scale(data)?;
            self.bundle.models.vae.latent_scale = scale;
        }
        let prefix = if vae_phase { "vae." } else { "denoiser." };
        self.bundle
            .models
            .store
            .set_trainable(|n| n.starts_with(prefix));

        let models = &self.bundle.models;
        let mut g = Graph::new();
        let loss = if vae_phase {
            let x = g.constant(vae_input);
            let z = models.vae.encode_var(&mut g, &models.store, x, false);
            let y = models.vae.decode_var(&mut g, &models.store, z);
            g.mse(y, x)
        } else {
            let z0 = models.vae.encode(&models.store, &hq, false)?;
            let t = rng.random_range(1..=self.schedule.num_steps());
            let eps = Tensor::randn(z0.shape(), &mut rng);
            let zt = self.schedule.add_noise(&z0, &eps, t)?;
            let target = self.schedule.training_target(&z0, &eps, t)?;
            let zt = g.constant(zt);
            let target = g.constant(target);
            let pred = models.denoiser.forward(&mut g, &models.store, zt, t, None);
            g.mse(pred, target)
        };
        let value = g.scalar(loss);
        check_finite(step, "pre-training loss", value)?;
        let grads = g.backward(loss).into_params();
        check_grads(step, &grads)?;

        let (key, lr) = if vae_phase {
            ("vae", cfg.pretrain.vae_lr)
        } else {
            ("denoiser", cfg.pretrain.denoiser_lr)
        };
        let (start, len) = if vae_phase {
            (0, cfg.pretrain.vae_steps)
        } else {
            (cfg.pretrain.vae_steps, cfg.pretrain.denoiser_steps)
        };
        let base = cfg.optimizer.clone();
        let mut opt = self
            .bundle
            .optimizers
            .remove(key)
            .unwrap_or_else(|| AdamW::new(AdamWConfig { lr, ..base }));
        opt.config.lr = cosine_lr(lr, cfg.pretrain.final_lr_fraction, step - start as u64, len);
        opt.update(&mut self.bundle.models.store, &grads);
        self.bundle.optimizers.insert(key.to_string(), opt);
        self.bundle.step += 1;
        Ok(PretrainStep {
            step,
            phase: if vae_phase {
                PretrainPhase::Vae
            } else {
                PretrainPhase::Denoiser
            },
            loss: value,
        })
    }

    /// Run until `total_steps`, or `limit` further steps if given.
    pub fn run(&mut self, data: &TrainSet, limit: Option<u64>) -> Result<Vec<PretrainStep>> {
        let end = match limit {
            Some(n) => (self.bundle.step + n).min(self.total_steps()),
            None => self.total_steps(),
        };
        let mut log = Vec::new();
        while self.bundle.step < end {
            log.push(self.step(data)?);
        }
        Ok(log)
    }
}

/// Train a fresh pair of prior models and return the bundle.
pub fn pretrain(config: &Config, data: &TrainSet) -> Result<(CheckpointBundle, Vec<PretrainStep>)> {
    let mut p = Pretrainer::new(config.clone())?;
    let log = p.run(data, None)?;
    Ok((p.bundle, log))
}

/// Encode every pair with the frozen encoder and pick t* by latent matching.
pub fn select_t_star(
    models: &Models,
    schedule: &Schedule,
    data: &TrainSet,
    stride: usize,
    seed: u64,
) -> Result<MidTimestepReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for (lq, hq) in data.lq_up.iter().zip(&data.hq) {
        pairs.push((
            models.vae.encode(&models.store, lq, false)?,
            models.vae.encode(&models.store, hq, false)?,
        ));
    }
    let mut rng = seeded_rng(derive_seed(seed, "midstep.eps", 0));
    precompute_mid_timestep(
        &pairs,
        schedule,
        &mut rng,
        &candidate_grid(schedule.num_steps(), stride),
    )
}

fn layout_for(crop: usize, native: usize, min_overlap: usize) -> Result<ChunkLayout> {
    if crop > native {
        plan_chunks((crop, crop), native, min_overlap)
    } else {
        Ok(ChunkLayout::single(crop))
    }
}

/// Outputs of one fine-tune step besides the loss breakdown.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub x_p: Tensor,
    /// Whether this step applied an optimiser update.
    pub updated: bool,
}

/// Adapter fine-tuning with alternating generator and discriminator updates.
pub struct FineTuner {
    pub bundle: CheckpointBundle,
    pub schedule: Schedule,
    pub t_star: usize,
    pub weights: LossWeights,
    embedder: PerceptualEmbedder,
    lpips_layout: ChunkLayout,
    gan_layout: ChunkLayout,
    gen_acc: BTreeMap<ParamId, Tensor>,
    disc_acc: BTreeMap<ParamId, Tensor>,
}

fn accumulate(acc: &mut BTreeMap<ParamId, Tensor>, grads: Vec<(ParamId, Tensor)>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

impl FineTuner {
    /// Start fine-tuning from a pre-trained bundle: inject adapters, fix t*.
    pub fn start(mut bundle: CheckpointBundle, t_star: usize) -> Result<Self> {
        if bundle.stage != STAGE_PRETRAIN {
            return Err(Error::Checkpoint(format!(
                "fine-tuning starts from a pre-training bundle, got `{}`",
                bundle.stage
            )));
        }
        let seed = bundle.config.seed;
        if !bundle.models.has_adapters() {
            bundle.models.config.lora = bundle.config.model.lora.clone();
            bundle.models.inject_adapters(seed)?;
        }
        bundle.stage = STAGE_FINETUNE.into();
        bundle.step = 0;
        bundle.t_star = Some(t_star);
        bundle.optimizers.clear();
        let ft = &bundle.config.finetune;
        let base = bundle.config.optimizer.clone();
        bundle.optimizers.insert(
            "gen".into(),
            AdamW::new(AdamWConfig {
                lr: ft.lr,
                ..base.clone()
            }),
        );
        bundle.optimizers.insert(
            "disc".into(),
            AdamW::new(AdamWConfig {
                lr: ft.disc_lr,
                ..base
            }),
        );
        Self::resume(bundle)
    }

    /// Continue a fine-tuning bundle saved at an accumulation boundary.
    pub fn resume(bundle: CheckpointBundle) -> Result<Self> {
        if bundle.stage != STAGE_FINETUNE {
            return Err(Error::Checkpoint(format!(
                "cannot resume fine-tuning from a `{}` bundle",
                bundle.stage
            )));
        }
        let t_star = bundle
            .t_star
            .ok_or_else(|| Error::Checkpoint("fine-tuning bundle has no t*".into()))?;
        let cfg = &bundle.config;
        let schedule = Schedule::new(cfg.scheduler.clone())?;
        let ft = &cfg.finetune;
        let lpips_layout = layout_for(ft.crop, ft.lpips_patch, ft.lpips_min_overlap)?;
        let gan_layout = layout_for(
            ft.crop,
            cfg.model.discriminator.native_input,
            ft.gan_min_overlap,
        )?;
        Ok(Self {
            weights: ft.weights,
            embedder: PerceptualEmbedder::default(),
            lpips_layout,
            gan_layout,
            schedule,
            t_star,
            bundle,
            gen_acc: BTreeMap::new(),
            disc_acc: BTreeMap::new(),
        })
    }

    pub fn lpips_layout(&self) -> &ChunkLayout {
        &self.lpips_layout
    }

    pub fn gan_layout(&self) -> &ChunkLayout {
        &self.gan_layout
    }

    /// True when no partially accumulated gradients are pending.
    pub fn at_boundary(&self) -> bool {
        self.bundle
            .step
            .is_multiple_of(self.bundle.config.finetune.accumulation as u64)
    }

    /// One micro-batch on `(x_L, x_H)` already at HQ resolution: generator
    /// forward/backward, then discriminator forward/backward on the detached
    /// prediction. Parameters change only at accumulation boundaries.
    pub fn finetune_step(&mut self, x_l: &Tensor, x_h: &Tensor) -> Result<StepOutput> {
        x_l.same_shape(x_h)?;
        let step = self.bundle.step;
        let cfg = &self.bundle.config;
        let w = self.weights;
        let models = &self.bundle.models;
        let store = &models.store;

        let z_h = models.vae.encode(store, x_h, false)?;
        let mut rng = seeded_rng(derive_seed(cfg.seed, "finetune.eps", step));
        let eps = Tensor::randn(z_h.shape(), &mut rng);

        let critic = Bound::new(&models.disc, store);
        let mut g = Graph::new();
        let xl = g.constant(x_l.clone());
        let xh = g.constant(x_h.clone());
        let zl = models.vae.encode_var(&mut g, store, xl, true);
        let zh = g.constant(z_h);
        let eps_pred = models
            .denoiser
            .forward(&mut g, store, zl, self.t_star, None);
        let zp = predict_one_step_var(&mut g, &self.schedule, zl, eps_pred, self.t_star)?;
        let xp = models.vae.decode_var(&mut g, store, zp);
        let lan = lan_loss_var(&mut g, &self.schedule, zl, zh, &eps, self.t_star)?;
        let mse = g.mse(xp, xh);
        let lp = oc_lpips_var(&mut g, &self.embedder, xp, xh, &self.lpips_layout)?;
        let gan_g = oc_gan_g_loss_var(&mut g, &critic, xp, &self.gan_layout)?;
        let terms = [
            (lan, w.lambda1),
            (mse, w.lambda2),
            (lp, w.lambda3),
            (gan_g, w.lambda4),
        ];
        let mut total = g.scale(terms[0].0, terms[0].1);
        for &(v, lambda) in &terms[1..] {
            let s = g.scale(v, lambda);
            total = g.add(total, s);
        }
        let mut breakdown = LossBreakdown {
            lan: g.scalar(lan),
            mse: g.scalar(mse),
            oc_lpips: g.scalar(lp),
            gan_g: g.scalar(gan_g),
            gan_d: 0.0,
            total: g.scalar(total),
        };
        check_finite(step, "generator loss", breakdown.total)?;
        let x_p = g.value(xp).clone();
        let gen_grads: Vec<_> = g
            .backward(total)
            .into_params()
            .into_iter()
            .filter(|(id, _)| !store.name(*id).starts_with("disc."))
            .collect();
        check_grads(step, &gen_grads)?;

        let mut gd = Graph::new();
        let d_loss = oc_gan_d_loss_var(&mut gd, &critic, x_h, &x_p, &self.gan_layout)?;
        breakdown.gan_d = gd.scalar(d_loss);
        check_finite(step, "discriminator loss", breakdown.gan_d)?;
        let disc_grads: Vec<_> = gd
            .backward(d_loss)
            .into_params()
            .into_iter()
            .filter(|(id, _)| store.name(*id).starts_with("disc."))
            .collect();
        check_grads(step, &disc_grads)?;

        accumulate(&mut self.gen_acc, gen_grads);
        accumulate(&mut self.disc_acc, disc_grads);
        self.bundle.step += 1;
        let updated = self.at_boundary();
        if updated {
            self.apply_updates();
        }
        Ok(StepOutput {
            breakdown,
            x_p,
            updated,
        })
    }

    fn apply_updates(&mut self) {
        let k = 1.0 / self.bundle.config.finetune.accumulation as f64;
        let gen: Vec<_> = std::mem::take(&mut self.gen_acc)
            .into_iter()
            .map(|(id, g)| (id, g.scale(k)))
            .collect();
        let disc: Vec<_> = std::mem::take(&mut self.disc_acc)
            .into_iter()
            .map(|(id, g)| (id, g.scale(k)))
            .collect();
        let store = &mut self.bundle.models.store;
        // Generator first, then the discriminator.
        self.bundle
            .optimizers
            .get_mut("gen")
            .expect("gen optimiser")
            .update(store, &gen);
        self.bundle
            .optimizers
            .get_mut("disc")
            .expect("disc optimiser")
            .update(store, &disc);
    }

    /// Sample the next crop from the seeded step stream and train on it.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepOutput> {
        let cfg = &self.bundle.config;
        let mut rng = seeded_rng(derive_seed(cfg.seed, "finetune.crop", self.bundle.step));
        let (x_l, x_h) = data.sample(&mut rng, cfg.finetune.crop)?;
        self.finetune_step(&x_l, &x_h)
    }

    /// Current model as a restorer.
    pub fn restorer(&self) -> Result<OneStep<'_>> {
        let m = &self.bundle.models;
        OneStep::new(
            &m.vae,
            &m.store,
            Some(&m.denoiser),
            self.schedule.clone(),
            self.t_star,
            self.bundle.config.degradation.downscale_factor,
        )
    }

    pub fn validate(&self, pairs: &[Pair]) -> Result<EvalReport> {
        evaluate(&self.restorer()?, pairs, &self.embedder)
    }
}

fn sample_grid(x_l: &Tensor, x_p: &Tensor, x_h: &Tensor) -> Tensor {
    let (c, h, w) = x_h.dims3();
    let parts = [x_l, x_p, x_h];
    Tensor::from_fn3(c, h, 3 * w, |ch, y, x| parts[x / w].at(ch, y, x % w))
}

/// Run `steps` micro-steps. With an output directory, writes `loss.csv`,
/// `samples/step_NNNNNN.png` and `checkpoints/step_NNNNNN/` at the configured
/// intervals, and the final bundle under `final/`.
pub fn run_finetune(
    tuner: &mut FineTuner,
    data: &TrainSet,
    steps: u64,
    out: Option<&Path>,
) -> Result<Vec<(u64, LossBreakdown)>> {
    let ft = tuner.bundle.config.finetune.clone();
    let mut log = Vec::new();
    let mut csv = String::from(LossBreakdown::CSV_HEADER);
    csv.push('\n');
    let end = tuner.bundle.step + steps;
    while tuner.bundle.step < end {
        let step = tuner.bundle.step;
        let cfg = &tuner.bundle.config;
        let mut rng = seeded_rng(derive_seed(cfg.seed, "finetune.crop", step));
        let (x_l, x_h) = data.sample(&mut rng, cfg.finetune.crop)?;
        let o = tuner.finetune_step(&x_l, &x_h)?;
        if ft.log_every > 0 && step.is_multiple_of(ft.log_every as u64) {
            log.push((step, o.breakdown));
            csv.push_str(&o.breakdown.csv_row(step));
            csv.push('\n');
        }
        let done = step + 1;
        if let Some(dir) = out {
            if ft.sample_every > 0 && done.is_multiple_of(ft.sample_every as u64) {
                save_png(
                    &dir.join("samples").join(format!("step_{done:06}.png")),
                    &sample_grid(&x_l, &o.x_p, &x_h),
                )?;
            }
            if ft.checkpoint_every > 0
                && done.is_multiple_of(ft.checkpoint_every as u64)
                && tuner.at_boundary()
            {
                tuner
                    .bundle
                    .save(&dir.join("checkpoints").join(format!("step_{done:06}")))?;
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("loss.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(csv.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        tuner.bundle.save(&dir.join("final"))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_pairs;
    use crate::models::{DenoiserConfig, VaeConfig};

    fn small_config() -> Config {
        let mut c = Config {
            seed: 11,
            ..Config::default()
        };
        c.model.vae = VaeConfig {
            hidden: 8,
            ..VaeConfig::default()
        };
        c.model.denoiser = DenoiserConfig {
            hidden: 8,
            ..DenoiserConfig::default()
        };
        c.model.discriminator.native_input = 16;
        c.pretrain.vae_steps = 3;
        c.pretrain.denoiser_steps = 3;
        c.pretrain.crop = 32;
        c.pretrain.scale_samples = 2;
        c.finetune.crop = 32;
        c.finetune.accumulation = 2;
        c.finetune.lr = 1e-3;
        c.finetune.disc_lr = 1e-3;
        c.finetune.lpips_patch = 24;
        c.finetune.gan_min_overlap = 8;
        c.finetune.lpips_min_overlap = 8;
        c.data.hq_size = 32;
        c
    }

    fn data(cfg: &Config) -> (Vec<Pair>, TrainSet) {
        let pairs = generate_pairs(3, cfg.data.hq_size, cfg.seed, &cfg.degradation).unwrap();
        let set = TrainSet::new(&pairs).unwrap();
        (pairs, set)
    }

    #[test]
    fn empty_training_set_is_a_config_error() {
        assert!(matches!(TrainSet::new(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted_run() {
        let cfg = small_config();
        let (_, set) = data(&cfg);
        let (full, log) = pretrain(&cfg, &set).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(log[2].phase, PretrainPhase::Vae);
        assert_eq!(log[3].phase, PretrainPhase::Denoiser);
        assert_ne!(full.models.vae.latent_scale, 1.0);

        for cut in [2u64, 4] {
            let mut p = Pretrainer::new(cfg.clone()).unwrap();
            p.run(&set, Some(cut)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            p.bundle.save(dir.path()).unwrap();
            let mut q = Pretrainer::resume(CheckpointBundle::load(dir.path()).unwrap()).unwrap();
            let rest = q.run(&set, None).unwrap();
            assert_eq!(rest[0].loss, log[cut as usize].loss);
            assert_eq!(
                q.bundle.models.store.digest(""),
                full.models.store.digest("")
            );
        }
    }

    #[test]
    fn finetune_keeps_frozen_weights_and_alternates() {
        let cfg = small_config();
        let (_, set) = data(&cfg);
        let (bundle, _) = pretrain(&cfg, &set).unwrap();
        let mut ft = FineTuner::start(bundle, 195).unwrap();
        assert_eq!(ft.lpips_layout().num_patches(), 4);
        assert_eq!(ft.gan_layout().num_patches(), 9);

        let store = &ft.bundle.models.store;
        let frozen = |s: &crate::nn::ParamStore| {
            s.entries()
                .iter()
                .filter(|e| !e.name.contains(".lora_") && !e.name.starts_with("disc."))
                .map(|e| e.value.digest())
                .collect::<Vec<_>>()
        };
        let frozen0 = frozen(store);
        let disc0 = store.digest("disc.");

        let o = ft.train_step(&set).unwrap();
        assert!(!o.updated);
        assert_eq!(ft.bundle.models.store.digest("disc."), disc0);
        let o = ft.train_step(&set).unwrap();
        assert!(o.updated);
        assert_ne!(ft.bundle.models.store.digest("disc."), disc0);
        assert_eq!(frozen(&ft.bundle.models.store), frozen0);
        let b = o.breakdown;
        let w = ft.weights;
        let want =
            w.lambda1 * b.lan + w.lambda2 * b.mse + w.lambda3 * b.oc_lpips + w.lambda4 * b.gan_g;
        assert!((b.total - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn finetune_is_deterministic_and_resumable() {
        let cfg = small_config();
        let (pairs, set) = data(&cfg);
        let (bundle, _) = pretrain(&cfg, &set).unwrap();

        let mut a = FineTuner::start(bundle.clone(), 100).unwrap();
        let la = run_finetune(&mut a, &set, 6, None).unwrap();

        let mut b = FineTuner::start(bundle, 100).unwrap();
        let lb1 = run_finetune(&mut b, &set, 4, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.bundle.save(dir.path()).unwrap();
        let mut c = FineTuner::resume(CheckpointBundle::load(dir.path()).unwrap()).unwrap();
        let lb2 = run_finetune(&mut c, &set, 2, None).unwrap();
        let lb: Vec<_> = lb1.into_iter().chain(lb2).collect();
        assert_eq!(la, lb);
        assert_eq!(
            a.bundle.models.store.digest(""),
            c.bundle.models.store.digest("")
        );
        let r = c.validate(&pairs).unwrap();
        assert_eq!(r.summary.count, 3);
    }

    #[test]
    fn zero_gan_weight_drops_the_term() {
        let mut cfg = small_config();
        cfg.finetune.weights.lambda4 = 0.0;
        let (_, set) = data(&cfg);
        let (bundle, _) = pretrain(&cfg, &set).unwrap();
        let mut ft = FineTuner::start(bundle, 50).unwrap();
        let b = ft.train_step(&set).unwrap().breakdown;
        let want = 5.0 * b.lan + 2.0 * b.mse + 5.0 * b.oc_lpips;
        assert!((b.total - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn run_writes_artifacts() {
        let mut cfg = small_config();
        cfg.finetune.sample_every = 2;
        cfg.finetune.checkpoint_every = 2;
        let (_, set) = data(&cfg);
        let (bundle, _) = pretrain(&cfg, &set).unwrap();
        let mut ft = FineTuner::start(bundle, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_finetune(&mut ft, &set, 4, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with("step,lan,mse,oc_lpips,gan_g,gan_d,total\n0,"));
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join("samples/step_000004.png").exists());
        assert!(dir
            .path()
            .join("checkpoints/step_000002/manifest.json")
            .exists());
        let back = CheckpointBundle::load(&dir.path().join("final")).unwrap();
        assert_eq!(back.step, 4);
        assert_eq!(back.t_star, Some(50));
    }
}
