//! Data-driven mid-timestep selection and the rollout gap probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Models;
use crate::predict::predict_one_step;
use crate::scheduler::{Schedule, ScheduleKind};
use crate::tensor::{derive_seed, seeded_rng, Tensor};

/// Mid-timestep used when no data-driven selection is available.
pub const DEFAULT_T_STAR_DDPM: usize = 195;
pub const DEFAULT_T_STAR_FM: usize = 295;

pub fn default_t_star(kind: ScheduleKind) -> usize {
    match kind {
        ScheduleKind::Ddpm => DEFAULT_T_STAR_DDPM,
        ScheduleKind::Fm => DEFAULT_T_STAR_FM,
    }
}

/// Candidate grid `0, stride, 2*stride, ...` up to and including `num_steps`.
pub fn candidate_grid(num_steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut v: Vec<usize> = (0..=num_steps).step_by(stride).collect();
    if v.last() != Some(&num_steps) {
        v.push(num_steps);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidTimestepReport {
    pub per_t_mse: BTreeMap<usize, f64>,
    pub t_star: usize,
    pub dataset_size: usize,
}

impl MidTimestepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mse\n");
        for (t, m) in &self.per_t_mse {
            writeln!(out, "{t},{m}").expect("string write");
        }
        out
    }
}

/// Mean over pairs of `mse(z_L, add_noise(z_H, eps_i, t))` for every
/// candidate `t`, with one noise draw per pair shared by all candidates.
pub fn precompute_mid_timestep(
    pairs: &[(Tensor, Tensor)],
    schedule: &Schedule,
    eps_source: &mut impl Rng,
    candidate_ts: &[usize],
) -> Result<MidTimestepReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("latent pairs"));
    }
    if candidate_ts.is_empty() {
        return Err(Error::Empty("candidate timesteps"));
    }
    let shape = pairs[0].0.shape().to_vec();
    for (zl, zh) in pairs {
        if zl.shape() != shape.as_slice() {
            return Err(Error::shape(&shape, zl.shape()));
        }
        zl.same_shape(zh)?;
    }
    let eps: Vec<Tensor> = pairs
        .iter()
        .map(|_| Tensor::randn(&shape, eps_source))
        .collect();

    let mut ts = candidate_ts.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let mut per_t_mse = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for &t in &ts {
        let mut acc = 0.0;
        for ((zl, zh), e) in pairs.iter().zip(&eps) {
            acc += zl.mse(&schedule.add_noise(zh, e, t)?)?;
        }
        let m = acc / pairs.len() as f64;
        per_t_mse.insert(t, m);
        // Ascending order with strict comparison keeps the smaller t on ties.
        if best.is_none_or(|(_, b)| m < b) {
            best = Some((t, m));
        }
    }
    Ok(MidTimestepReport {
        per_t_mse,
        t_star: best.expect("non-empty").0,
        dataset_size: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProbeReport {
    /// `(rollout step, t, mse)` per step.
    pub step_mse: Vec<(usize, usize, f64)>,
    pub injection_step: Option<usize>,
    pub injection_level: f64,
}

impl GapProbeReport {
    pub fn final_mse(&self) -> f64 {
        self.step_mse.last().map(|s| s.2).unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,mse\n");
        for (s, t, m) in &self.step_mse {
            writeln!(out, "{s},{t},{m}").expect("string write");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapProbeConfig {
    pub steps: usize,
    pub injection_step: Option<usize>,
    pub injection_level: f64,
    /// Image side whose latent the rollout runs on.
    pub image_size: usize,
}

impl Default for GapProbeConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            injection_step: Some(16),
            injection_level: 0.0,
            image_size: 64,
        }
    }
}

/// Rollout timesteps from `num_steps` down, `steps` entries, evenly spaced.
pub fn rollout_timesteps(num_steps: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| ((num_steps * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Deterministic `steps`-step rollout from Gaussian noise that, at each step,
/// records the gap between the current latent and the interpolation of the
/// current clean estimate with the initial noise. Optionally perturbs the
/// latent with fresh noise scaled by `injection_level` at one rollout step.
pub fn gap_probe(
    models: &Models,
    schedule: &Schedule,
    probe: &GapProbeConfig,
    seed: u64,
) -> Result<GapProbeReport> {
    let steps = probe.steps;
    if steps < 2 {
        return Err(Error::Config(format!(
            "gap probe needs at least 2 steps, got {steps}"
        )));
    }
    if let Some(k) = probe.injection_step {
        if k == 0 || k >= steps {
            return Err(Error::Config(format!(
                "injection step {k} outside [1, {}]",
                steps - 1
            )));
        }
    }
    if !(probe.injection_level.is_finite() && probe.injection_level >= 0.0) {
        return Err(Error::Config(
            "injection level must be finite and non-negative".into(),
        ));
    }
    let f = models.vae.factor();
    if probe.image_size == 0 || !probe.image_size.is_multiple_of(2 * f) {
        return Err(Error::Config(format!(
            "probe image size {} must be a positive multiple of {}",
            probe.image_size,
            2 * f
        )));
    }
    let side = probe.image_size / f;
    let shape = [models.vae.config.latent_channels, side, side];
    let eps0 = Tensor::randn(&shape, &mut seeded_rng(derive_seed(seed, "probe.eps", 0)));
    let injected = Tensor::randn(
        &shape,
        &mut seeded_rng(derive_seed(seed, "probe.inject", 0)),
    );

    let ts = rollout_timesteps(schedule.num_steps(), steps);
    let mut z = eps0.clone();
    let mut step_mse = Vec::with_capacity(steps);
    for (i, &t) in ts.iter().enumerate() {
        if probe.injection_step == Some(i) {
            z = z.lincomb(1.0, &injected, probe.injection_level)?;
        }
        let pred = models.denoiser.denoise(&models.store, &z, t, None)?;
        let z0 = predict_one_step(schedule, &z, &pred, t)?;
        let rebuilt = schedule.add_noise(&z0, &eps0, t)?;
        let gap = z.mse(&rebuilt)?;
        if !gap.is_finite() || !z0.is_finite() {
            return Err(Error::Numerical {
                step: i,
                what: "gap probe latent is not finite".into(),
            });
        }
        step_mse.push((i, t, gap));
        let t_next = ts.get(i + 1).copied().unwrap_or(0);
        z = match schedule.kind() {
            ScheduleKind::Ddpm => schedule.add_noise(&z0, &pred, t_next)?,
            ScheduleKind::Fm => {
                let ds = schedule.sigma(t_next)? - schedule.sigma(t)?;
                z.lincomb(1.0, &pred, ds)?
            }
        };
    }
    Ok(GapProbeReport {
        step_mse,
        injection_step: probe.injection_step,
        injection_level: probe.injection_level,
    })
}
