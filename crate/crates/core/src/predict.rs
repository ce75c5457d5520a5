//! One mid-timestep prediction: invert the forward interpolation at `t*` in a
//! single step using the denoiser's output.

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::scheduler::{Schedule, ScheduleKind};
use crate::tensor::Tensor;

/// ᾱ at or below this is treated as a degenerate timestep.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

/// Affine coefficients `(a, b)` such that `z_P = a * z_L - b * eps_pred`.
pub fn prediction_coefficients(schedule: &Schedule, t_star: usize) -> Result<(f64, f64)> {
    match schedule.kind() {
        ScheduleKind::Ddpm => {
            let ab = schedule.alpha_bar(t_star)?;
            if ab <= ALPHA_BAR_FLOOR {
                return Err(Error::DegenerateTimestep {
                    t: t_star,
                    alpha_bar: ab,
                });
            }
            let s = ab.sqrt();
            Ok((1.0 / s, (1.0 - ab).sqrt() / s))
        }
        // σ is taken at t* as in the DDPM branch.
        ScheduleKind::Fm => Ok((1.0, schedule.sigma(t_star)?)),
    }
}

pub fn predict_one_step(
    schedule: &Schedule,
    z_l: &Tensor,
    eps_pred: &Tensor,
    t_star: usize,
) -> Result<Tensor> {
    z_l.same_shape(eps_pred)?;
    let (a, b) = prediction_coefficients(schedule, t_star)?;
    z_l.lincomb(a, eps_pred, -b)
}

/// Differentiable variant recorded on a graph.
pub fn predict_one_step_var(
    g: &mut Graph,
    schedule: &Schedule,
    z_l: Var,
    eps_pred: Var,
    t_star: usize,
) -> Result<Var> {
    let (a, b) = prediction_coefficients(schedule, t_star)?;
    let scaled = g.scale(eps_pred, b);
    let base = if a == 1.0 { z_l } else { g.scale(z_l, a) };
    Ok(g.sub(base, scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::ScheduleConfig;
    use crate::tensor::seeded_rng;

    #[test]
    fn inverts_ddpm_interpolation() {
        let s = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let mut rng = seeded_rng(3);
        let z_h = Tensor::randn(&[4, 6, 6], &mut rng);
        let eps = Tensor::randn(&[4, 6, 6], &mut rng);
        for t in [0, 1, 195, 500, 999] {
            let z_l = s.add_noise(&z_h, &eps, t).unwrap();
            let z_p = predict_one_step(&s, &z_l, &eps, t).unwrap();
            assert!(z_p.max_abs_diff(&z_h) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn inverts_fm_interpolation() {
        let s = Schedule::new(ScheduleConfig::fm()).unwrap();
        let mut rng = seeded_rng(4);
        let z_h = Tensor::randn(&[4, 6, 6], &mut rng);
        let eps = Tensor::randn(&[4, 6, 6], &mut rng);
        let velocity = eps.sub(&z_h).unwrap();
        for t in [0, 1, 295, 999] {
            let z_l = s.add_noise(&z_h, &eps, t).unwrap();
            let z_p = predict_one_step(&s, &z_l, &velocity, t).unwrap();
            assert!(z_p.max_abs_diff(&z_h) < 1e-6, "t={t}");
        }
    }

    #[test]
    fn zero_prediction_is_identity_for_fm() {
        let s = Schedule::new(ScheduleConfig::fm()).unwrap();
        let z = Tensor::from_fn3(2, 3, 3, |c, y, x| (c + y * x) as f64);
        let out = predict_one_step(&s, &z, &Tensor::zeros(&[2, 3, 3]), 295).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn degenerate_alpha_bar_is_rejected() {
        let cfg = ScheduleConfig {
            beta_start: 0.5,
            beta_end: 0.9,
            ..ScheduleConfig::ddpm()
        };
        let s = Schedule::new(cfg).unwrap();
        let z = Tensor::zeros(&[1, 2, 2]);
        let err = predict_one_step(&s, &z, &z, 999).unwrap_err();
        assert!(matches!(err, Error::DegenerateTimestep { .. }));
    }

    #[test]
    fn graph_variant_matches_tensor_variant() {
        let s = Schedule::new(ScheduleConfig::ddpm()).unwrap();
        let mut rng = seeded_rng(9);
        let z = Tensor::randn(&[4, 4, 4], &mut rng);
        let e = Tensor::randn(&[4, 4, 4], &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let ev = g.constant(e.clone());
        let out = predict_one_step_var(&mut g, &s, zv, ev, 195).unwrap();
        let want = predict_one_step(&s, &z, &e, 195).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }
}
