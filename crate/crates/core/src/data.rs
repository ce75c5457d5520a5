//! Procedural texture corpus, PNG I/O and LQ/HQ pair directories.
//!
//! Images are `[3, H, W]` tensors with values in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::degrade::{degrade, DegradationConfig};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_rng, Tensor};

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

/// Snap every value onto the 8-bit grid a PNG round trip would produce.
pub fn quantize_u8(img: &Tensor) -> Tensor {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn3(3, h as usize, w as usize, |c, y, x| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    }))
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.check_rank3()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "PNG output needs 3 channels".into(),
        });
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(img.at(0, y, x)),
            to_u8(img.at(1, y, x)),
            to_u8(img.at(2, y, x)),
        ])
    });
    out.save(path)?;
    Ok(())
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    ]
}

/// One procedural texture: a colour gradient, sharp-edged oriented gratings
/// and a few discs.
pub fn procedural_texture(size: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let base = color(&mut rng);
    let tint = color(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n_gratings = rng.random_range(1..=3usize);
    let gratings: Vec<([f64; 3], f64, f64, f64, f64)> = (0..n_gratings)
        .map(|_| {
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period: f64 = rng.random_range(6.0..32.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let sharp: f64 = rng.random_range(1.0..6.0);
            (color(&mut rng), th, period, phase, sharp)
        })
        .collect();
    let n_discs = rng.random_range(0..=4usize);
    let s = size as f64;
    let discs: Vec<([f64; 3], f64, f64, f64)> = (0..n_discs)
        .map(|_| {
            (
                color(&mut rng),
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s * 0.05..s * 0.25),
            )
        })
        .collect();
    let (ca, sa) = (angle.cos(), angle.sin());
    Tensor::from_fn3(3, size, size, |c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let g = ((xf * ca + yf * sa) / s).clamp(-1.0, 1.0);
        let mut v = base[c] * (1.0 - 0.5 * g.abs()) + tint[c] * 0.5 * g;
        for (col, th, period, phase, sharp) in &gratings {
            let u = xf * th.cos() + yf * th.sin();
            let wave = (sharp * (std::f64::consts::TAU * u / period + phase).sin()).tanh();
            v += 0.35 * col[c] * wave;
        }
        for (col, cx, cy, r) in &discs {
            let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
            let inside = 0.5 - 0.5 * ((d - r) * 1.5).tanh();
            v = v * (1.0 - inside) + col[c] * inside;
        }
        v.clamp(-1.0, 1.0)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub lq: Tensor,
    pub hq: Tensor,
}

/// `count` HQ textures with their degraded LQ counterparts, all snapped to
/// the 8-bit grid. Item `i` depends only on `(seed, i)`.
pub fn generate_pairs(
    count: usize,
    size: usize,
    seed: u64,
    degradation: &DegradationConfig,
) -> Result<Vec<Pair>> {
    (0..count)
        .map(|i| {
            let hq = quantize_u8(&procedural_texture(
                size,
                derive_seed(seed, "texture", i as u64),
            ));
            let (lq, _) = degrade(&hq, degradation, derive_seed(seed, "degrade", i as u64))?;
            Ok(Pair {
                name: format!("{i:05}.png"),
                lq: quantize_u8(&lq),
                hq,
            })
        })
        .collect()
}

pub fn write_pairs(dir: &Path, pairs: &[Pair]) -> Result<()> {
    for p in pairs {
        save_png(&dir.join("lq").join(&p.name), &p.lq)?;
        save_png(&dir.join("hq").join(&p.name), &p.hq)?;
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Load `dir/lq/*.png` with matching `dir/hq/*.png`, ordered by file name.
pub fn load_pairs(dir: &Path) -> Result<Vec<Pair>> {
    let lq_dir: PathBuf = dir.join("lq");
    let hq_dir: PathBuf = dir.join("hq");
    let mut pairs = Vec::new();
    for name in png_names(&lq_dir)? {
        let hq_path = hq_dir.join(&name);
        if !hq_path.exists() {
            return Err(Error::Config(format!("no HQ image for {name}")));
        }
        pairs.push(Pair {
            lq: load_png(&lq_dir.join(&name))?,
            hq: load_png(&hq_path)?,
            name,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_grid_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
        assert_eq!(to_u8(-3.0), 0);
        assert_eq!(to_u8(3.0), 255);
    }

    #[test]
    fn textures_are_seeded_and_bounded() {
        let a = procedural_texture(32, 1);
        assert_eq!(a, procedural_texture(32, 1));
        assert_ne!(a, procedural_texture(32, 2));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pairs_survive_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = generate_pairs(2, 32, 5, &DegradationConfig::default()).unwrap();
        write_pairs(dir.path(), &pairs).unwrap();
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert!(a.hq.max_abs_diff(&b.hq) < 1e-12);
            assert!(a.lq.max_abs_diff(&b.lq) < 1e-12);
            assert_eq!(b.lq.shape(), &[3, 8, 8]);
        }
    }
}
