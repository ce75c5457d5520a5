//! PSNR, SSIM and the evaluation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::infer::Restore;
use crate::losses::{perceptual_distance_var, FeatureExtractor};
use crate::nn::Graph;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
/// Peak-to-peak range of `[-1, 1]` images.
pub const IMAGE_PEAK: f64 = 2.0;
pub const SSIM_WINDOW: usize = 7;

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Windowed sums of one channel via a summed-area table.
struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut table = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y, x);
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, table }
    }

    fn window(&self, y: usize, x: usize, k: usize) -> f64 {
        let s = self.w + 1;
        self.table[(y + k) * s + x + k] - self.table[y * s + x + k] - self.table[(y + k) * s + x]
            + self.table[y * s + x]
    }
}

/// Mean SSIM over all valid `window`-sized square windows of every channel,
/// with uniform weights and population statistics.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = a.check_rank3()?;
    if window == 0 || window.is_multiple_of(2) || window > h || window > w {
        return Err(Error::Config(format!(
            "SSIM window {window} must be odd and fit {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let sa = Integral::new(h, w, |y, x| a.at(ch, y, x));
        let sb = Integral::new(h, w, |y, x| b.at(ch, y, x));
        let saa = Integral::new(h, w, |y, x| a.at(ch, y, x).powi(2));
        let sbb = Integral::new(h, w, |y, x| b.at(ch, y, x).powi(2));
        let sab = Integral::new(h, w, |y, x| a.at(ch, y, x) * b.at(ch, y, x));
        for y in 0..=h - window {
            for x in 0..=w - window {
                let ma = sa.window(y, x, window) / n;
                let mb = sb.window(y, x, window) / n;
                let va = (saa.window(y, x, window) / n - ma * ma).max(0.0);
                let vb = (sbb.window(y, x, window) / n - mb * mb).max(0.0);
                let cov = sab.window(y, x, window) / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Perceptual distance between two whole images.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, embedder: &dyn FeatureExtractor) -> Result<f64> {
    a.same_shape(b)?;
    let mut g = Graph::inference();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let d = perceptual_distance_var(&mut g, embedder, va, vb);
    Ok(g.scalar(d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
    pub pdist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Toy-embedder distance; not comparable to published LPIPS values.
    pub mean_pdist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,psnr,ssim,pdist\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.file, r.psnr, r.ssim, r.pdist).expect("string write");
        }
        out
    }
}

/// Restore every LQ image and score it against its HQ reference. Rows are
/// ordered by file name.
pub fn evaluate(
    model: &dyn Restore,
    pairs: &[Pair],
    embedder: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut rows = pairs
        .iter()
        .map(|p| {
            let out = model.restore(&p.lq)?;
            Ok(EvalRow {
                file: p.name.clone(),
                psnr: psnr(&out, &p.hq, IMAGE_PEAK)?,
                ssim: ssim(&out, &p.hq, SSIM_WINDOW, IMAGE_PEAK)?,
                pdist: perceptual_distance(&out, &p.hq, embedder)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.file.cmp(&b.file));
    let n = rows.len() as f64;
    let summary = EvalSummary {
        count: rows.len(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_pdist: rows.iter().map(|r| r.pdist).sum::<f64>() / n,
    };
    Ok(EvalReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::Identity;
    use crate::models::PerceptualEmbedder;
    use crate::tensor::seeded_rng;

    #[test]
    fn psnr_anchors() {
        let a = Tensor::full(&[3, 4, 4], 0.2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let mut rng = seeded_rng(1);
        let a = Tensor::rand_uniform(&[3, 9, 9], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 9, 9], -1.0, 1.0, &mut rng);
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        let want = 10.0 * (4.0 / (s / a.len() as f64)).log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_anchors() {
        let mut rng = seeded_rng(2);
        let a = Tensor::rand_uniform(&[3, 12, 12], -1.0, 1.0, &mut rng);
        assert!((ssim(&a, &a, 7, 2.0).unwrap() - 1.0).abs() < 1e-12);

        let (u, v) = (0.3, -0.2);
        let c1 = (0.01f64 * 2.0).powi(2);
        let want = (2.0 * u * v + c1) / (u * u + v * v + c1);
        let got = ssim(
            &Tensor::full(&[1, 10, 10], u),
            &Tensor::full(&[1, 10, 10], v),
            7,
            2.0,
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);

        let checker = Tensor::from_fn3(
            1,
            14,
            14,
            |_, y, x| if (x + y) % 2 == 0 { 0.5 } else { -0.5 },
        );
        assert!(ssim(&checker, &checker.scale(-1.0), 7, 2.0).unwrap() < 0.0);
        assert!(ssim(&a, &a, 4, 2.0).is_err());
    }

    #[test]
    fn evaluate_identity_on_identical_pairs() {
        let embedder = PerceptualEmbedder::default();
        assert!(evaluate(&Identity, &[], &embedder).is_err());
        let mut rng = seeded_rng(3);
        let pairs: Vec<Pair> = (0..3)
            .rev()
            .map(|i| {
                let x = Tensor::rand_uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
                Pair {
                    name: format!("{i}.png"),
                    lq: x.clone(),
                    hq: x,
                }
            })
            .collect();
        let r = evaluate(&Identity, &pairs, &embedder).unwrap();
        assert_eq!(r.summary.count, 3);
        assert_eq!(r.rows[0].file, "0.png");
        assert!(r
            .rows
            .iter()
            .all(|row| row.psnr == PSNR_CAP && row.pdist == 0.0));
        assert!(r.to_csv().starts_with("file,psnr,ssim,pdist\n0.png,99,"));
    }
}
