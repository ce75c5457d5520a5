//! DDPM and flow-matching noise schedules over an integer step grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ddpm,
    Fm,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Ddpm => "ddpm",
            ScheduleKind::Fm => "fm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::ddpm()
    }
}

impl ScheduleConfig {
    pub const DEFAULT_STEPS: usize = 999;

    pub fn ddpm() -> Self {
        Self {
            kind: ScheduleKind::Ddpm,
            num_steps: Self::DEFAULT_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
            shift: 3.0,
        }
    }

    pub fn fm() -> Self {
        Self {
            kind: ScheduleKind::Fm,
            ..Self::ddpm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("scheduler.num_steps must be positive".into()));
        }
        match self.kind {
            ScheduleKind::Ddpm => {
                let ok = |b: f64| b > 0.0 && b < 1.0;
                if !ok(self.beta_start) || !ok(self.beta_end) {
                    return Err(Error::Config("scheduler betas must lie in (0, 1)".into()));
                }
            }
            ScheduleKind::Fm => {
                if !(self.shift > 0.0 && self.shift.is_finite()) {
                    return Err(Error::Config("scheduler.shift must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.num_steps,
            });
        }
        Ok(())
    }

    fn require(&self, kind: ScheduleKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.name(),
                actual: self.kind.name(),
            });
        }
        Ok(())
    }

    /// β_s for s in 1..=num_steps, linear from `beta_start` to `beta_end`.
    pub fn beta(&self, s: usize) -> f64 {
        debug_assert!(s >= 1 && s <= self.num_steps);
        if self.num_steps == 1 {
            return self.beta_start;
        }
        let frac = (s - 1) as f64 / (self.num_steps - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// Precomputed ᾱ (DDPM) or σ (FM) table for every grid index `0..=num_steps`.
#[derive(Clone, Debug)]
pub struct Schedule {
    config: ScheduleConfig,
    table: Vec<f64>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_steps;
        let table = match config.kind {
            ScheduleKind::Ddpm => {
                let mut table = Vec::with_capacity(n + 1);
                let mut acc = 1.0;
                table.push(acc);
                for s in 1..=n {
                    acc *= 1.0 - config.beta(s);
                    table.push(acc);
                }
                table
            }
            ScheduleKind::Fm => (0..=n)
                .map(|t| shifted_sigma(config.shift, t as f64 / n as f64))
                .collect(),
        };
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn kind(&self) -> ScheduleKind {
        self.config.kind
    }

    pub fn num_steps(&self) -> usize {
        self.config.num_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.config.require(ScheduleKind::Ddpm)?;
        self.config.check_step(t)?;
        Ok(self.table[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.config.require(ScheduleKind::Fm)?;
        self.config.check_step(t)?;
        Ok(self.table[t])
    }

    /// `(clean weight, noise weight)` of the forward interpolation at `t`.
    pub fn mix_weights(&self, t: usize) -> Result<(f64, f64)> {
        self.config.check_step(t)?;
        let v = self.table[t];
        Ok(match self.config.kind {
            ScheduleKind::Ddpm => (v.sqrt(), (1.0 - v).sqrt()),
            ScheduleKind::Fm => (1.0 - v, v),
        })
    }

    /// Forward interpolation between clean latent and noise.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        z0.same_shape(eps)?;
        let (a, b) = self.mix_weights(t)?;
        if b == 0.0 {
            return Ok(z0.clone());
        }
        if a == 0.0 {
            return Ok(eps.clone());
        }
        z0.lincomb(a, eps, b)
    }

    /// Regression target for the denoiser: ε (DDPM) or the velocity ε − z0 (FM).
    pub fn training_target(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        z0.same_shape(eps)?;
        self.config.check_step(t)?;
        match self.config.kind {
            ScheduleKind::Ddpm => Ok(eps.clone()),
            ScheduleKind::Fm => eps.sub(z0),
        }
    }
}

fn shifted_sigma(shift: f64, u: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

pub fn alpha_bar(config: &ScheduleConfig, t: usize) -> Result<f64> {
    Schedule::new(config.clone())?.alpha_bar(t)
}

pub fn sigma(config: &ScheduleConfig, t: usize) -> Result<f64> {
    Schedule::new(config.clone())?.sigma(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product_oracle(cfg: &ScheduleConfig, t: usize) -> f64 {
        let mut p = 1.0;
        for s in 1..=t {
            let beta = cfg.beta_start
                + (cfg.beta_end - cfg.beta_start) * (s as f64 - 1.0) / (cfg.num_steps as f64 - 1.0);
            p *= 1.0 - beta;
        }
        p
    }

    #[test]
    fn alpha_bar_anchors() {
        let cfg = ScheduleConfig::ddpm();
        assert_eq!(cfg.num_steps, 999);
        let s = Schedule::new(cfg.clone()).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        let want = product_oracle(&cfg, 999);
        assert!((s.alpha_bar(999).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            s.alpha_bar(1000),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(s.sigma(3), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn sigma_anchors() {
        let s = Schedule::new(ScheduleConfig::fm()).unwrap();
        assert_eq!(s.sigma(0).unwrap(), 0.0);
        assert!((s.sigma(999).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(s.alpha_bar(3), Err(Error::KindMismatch { .. })));

        let mut cfg = ScheduleConfig::fm();
        cfg.num_steps = 2;
        let s = Schedule::new(cfg).unwrap();
        // u = 0.5, shift 3: 1.5 / 2.0
        assert!((s.sigma(1).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn add_noise_examples() {
        let fm = Schedule::new(ScheduleConfig::fm()).unwrap();
        let z0 = Tensor::from_fn3(1, 2, 2, |_, y, x| (y * 2 + x) as f64);
        let eps = Tensor::from_fn3(1, 2, 2, |_, y, x| -((y + x) as f64));
        assert_eq!(fm.add_noise(&z0, &eps, 0).unwrap(), z0);
        assert_eq!(fm.add_noise(&z0, &eps, 999).unwrap(), eps);

        // Hand-evaluated: sqrt(0.25) * 1 + sqrt(0.75) * 0 = 0.5.
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2]);
        let (a, b) = (0.25f64.sqrt(), 0.75f64.sqrt());
        let out = ones.lincomb(a, &zeros, b).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let bad = Tensor::zeros(&[1, 2, 3]);
        assert!(fm.add_noise(&z0, &bad, 1).is_err());
    }

    #[test]
    fn training_target_examples() {
        let ddpm = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let fm = Schedule::new(ScheduleConfig::fm()).unwrap();
        let z0 = Tensor::zeros(&[2, 2, 2]);
        let eps = Tensor::full(&[2, 2, 2], 1.0);
        assert_eq!(ddpm.training_target(&z0, &eps, 10).unwrap(), eps);
        assert_eq!(
            fm.training_target(&eps, &eps, 10).unwrap(),
            Tensor::zeros(&[2, 2, 2])
        );
        assert_eq!(fm.training_target(&z0, &eps, 10).unwrap(), eps);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = ScheduleConfig::ddpm();
        c.beta_end = 1.5;
        assert!(Schedule::new(c).is_err());
        let mut c = ScheduleConfig::fm();
        c.shift = 0.0;
        assert!(Schedule::new(c).is_err());
    }
}
