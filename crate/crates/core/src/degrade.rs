//! Seeded synthetic degradation: blur, bicubic downscale, Gaussian noise and
//! a block-DCT compression surrogate, optionally applied twice.
//!
//! Random parameters are drawn in a fixed order from one ChaCha stream:
//! blur sigma, noise sigma, quality, then (second order only) the same three
//! again; noise fields are drawn afterwards, first pass before second.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(first source index, weights)` for resampling one
/// axis from `n_in` to `n_out`, antialiased when shrinking. Out-of-range
/// taps are clamped to the edge.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic((i as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as i64 - 1) as usize;
                total += w;
                match taps.iter_mut().find(|t| t.0 == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of a `[C, H, W]` tensor.
pub fn resize_bicubic(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.check_rank3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            shape: vec![c, out_h, out_w],
            reason: "resize target must be non-empty".into(),
        });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let tx = axis_taps(w, out_w);
    let ty = axis_taps(h, out_h);
    let src = img.data();
    let mut mid = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..][..w];
            for (x, taps) in tx.iter().enumerate() {
                mid[(ch * h + y) * out_w + x] = taps.iter().map(|&(i, wt)| row[i] * wt).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..out_w {
                out[(ch * out_h + y) * out_w + x] = taps
                    .iter()
                    .map(|&(i, wt)| mid[(ch * h + i) * out_w + x] * wt)
                    .sum();
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding; `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = img.check_rank3()?;
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let src = img.data();
    let mut mid = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - r, w);
                    acc += kv * src[(ch * h + y) * w + xx];
                }
                mid[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + j as i64 - r, h);
                    acc += kv * mid[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

const BLOCK: usize = 8;
/// Quantisation step at quality 0, in [-1, 1] image units.
pub const MAX_QUANT_STEP: f64 = 0.5;

pub fn quality_to_step(quality: u32) -> f64 {
    MAX_QUANT_STEP * (100 - quality.min(100)) as f64 / 100.0
}

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in m.iter_mut().enumerate() {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        for (i, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// Orthonormal 8x8 block DCT, uniform quantisation, inverse. Edge blocks are
/// padded by replication. Quality 100 is the identity.
pub fn dct_quantize(img: &Tensor, quality: u32) -> Result<Tensor> {
    let (c, h, w) = img.check_rank3()?;
    let step = quality_to_step(quality);
    if step == 0.0 {
        return Ok(img.clone());
    }
    let d = dct_matrix();
    let mut out = img.clone();
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for ch in 0..c {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = img.at(ch, (by + i).min(h - 1), (bx + j).min(w - 1));
                    }
                }
                // coef = D * B * D^T
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        tmp[i][j] = (0..BLOCK).map(|k| d[i][k] * block[k][j]).sum();
                    }
                }
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let v: f64 = (0..BLOCK).map(|k| tmp[i][k] * d[j][k]).sum();
                        block[i][j] = (v / step).round() * step;
                    }
                }
                // B = D^T * coef * D
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        tmp[i][j] = (0..BLOCK).map(|k| d[k][i] * block[k][j]).sum();
                    }
                }
                for i in 0..BLOCK.min(h - by) {
                    for j in 0..BLOCK.min(w - bx) {
                        let v: f64 = (0..BLOCK).map(|k| tmp[i][k] * d[k][j]).sum();
                        out.set(ch, by + i, bx + j, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub blur_sigma_range: (f64, f64),
    pub downscale_factor: usize,
    /// Noise standard deviation in [-1, 1] image units.
    pub noise_sigma_range: (f64, f64),
    pub compression_quality_range: (u32, u32),
    pub second_order: bool,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: (0.2, 2.0),
            downscale_factor: 4,
            noise_sigma_range: (0.02, 0.24),
            compression_quality_range: (30, 95),
            second_order: false,
        }
    }
}

impl DegradationConfig {
    /// Every stage off: the output equals the input.
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: (0.0, 0.0),
            downscale_factor: 1,
            noise_sigma_range: (0.0, 0.0),
            compression_quality_range: (100, 100),
            second_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered =
            |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !ordered(self.blur_sigma_range) || !ordered(self.noise_sigma_range) {
            return Err(Error::Config(
                "degradation ranges must be ordered, finite and non-negative".into(),
            ));
        }
        let (qlo, qhi) = self.compression_quality_range;
        if qlo > qhi || qhi > 100 {
            return Err(Error::Config(
                "quality range must be ordered within 0..=100".into(),
            ));
        }
        if self.downscale_factor == 0 {
            return Err(Error::Config("downscale factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters sampled for one pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub quality: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub seed: u64,
    pub downscale_factor: usize,
    pub passes: Vec<PassParams>,
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + u * (hi - lo)
}

fn sample_quality(rng: &mut impl Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.random_range(lo..=hi)
}

fn add_noise(img: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    out
}

/// Degrade `hq` (values in [-1, 1]) into an LQ image `factor` times smaller.
pub fn degrade(
    hq: &Tensor,
    config: &DegradationConfig,
    seed: u64,
) -> Result<(Tensor, DegradationParams)> {
    config.validate()?;
    let (_, h, w) = hq.check_rank3()?;
    let f = config.downscale_factor;
    if h % f != 0 || w % f != 0 {
        return Err(Error::InvalidShape {
            shape: hq.shape().to_vec(),
            reason: format!("sides must be divisible by {f}"),
        });
    }
    let mut rng = seeded_rng(seed);
    let mut passes = vec![PassParams {
        blur_sigma: sample_range(&mut rng, config.blur_sigma_range),
        noise_sigma: sample_range(&mut rng, config.noise_sigma_range),
        quality: sample_quality(&mut rng, config.compression_quality_range),
    }];
    if config.second_order {
        let (qlo, qhi) = config.compression_quality_range;
        let milder = ((qlo + qhi).div_ceil(2), qhi);
        let half = |(lo, hi): (f64, f64)| (lo * 0.5, hi * 0.5);
        passes.push(PassParams {
            blur_sigma: sample_range(&mut rng, half(config.blur_sigma_range)),
            noise_sigma: sample_range(&mut rng, half(config.noise_sigma_range)),
            quality: sample_quality(&mut rng, milder),
        });
    }

    let first = passes[0];
    let mut x = gaussian_blur(hq, first.blur_sigma)?;
    x = resize_bicubic(&x, h / f, w / f)?;
    if first.noise_sigma > 0.0 {
        x = add_noise(&x, first.noise_sigma, &mut rng);
    }
    x = dct_quantize(&x.clamp(-1.0, 1.0), first.quality)?;
    if let Some(second) = passes.get(1).copied() {
        x = gaussian_blur(&x, second.blur_sigma)?;
        if second.noise_sigma > 0.0 {
            x = add_noise(&x, second.noise_sigma, &mut rng);
        }
        x = dct_quantize(&x.clamp(-1.0, 1.0), second.quality)?;
    }
    Ok((
        x.clamp(-1.0, 1.0),
        DegradationParams {
            seed,
            downscale_factor: f,
            passes,
        },
    ))
}
