//! Overlapping patch grids: planning, extraction and partition-of-unity
//! blending.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default minimum overlap for loss chunking.
pub const LOSS_MIN_OVERLAP: usize = 32;
/// Default minimum overlap for tiled restoration.
pub const TILE_MIN_OVERLAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// Later patches (row-major) overwrite earlier ones.
    None,
    /// Separable linear ramps over overlap margins, normalised per pixel.
    Feather,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub starts_y: Vec<usize>,
    pub starts_x: Vec<usize>,
    pub min_overlap: usize,
    pub blend: BlendMode,
}

/// Minimal-count uniformly spaced starts covering `len` with `patch`-wide
/// windows that overlap by at least `min_overlap`.
fn axis_starts(len: usize, patch: usize, min_overlap: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let stride = patch - min_overlap;
    let span = len - patch;
    let k = span.div_ceil(stride) + 1;
    let gaps = k - 1;
    (0..k).map(|i| (i * span + gaps / 2) / gaps).collect()
}

pub fn plan_chunks(
    image_size: (usize, usize),
    patch_size: usize,
    min_overlap: usize,
) -> Result<ChunkLayout> {
    let (h, w) = image_size;
    if patch_size == 0 {
        return Err(Error::Layout("patch size must be positive".into()));
    }
    if patch_size > h || patch_size > w {
        return Err(Error::Layout(format!(
            "patch {patch_size} larger than image {h}x{w}"
        )));
    }
    if min_overlap >= patch_size {
        return Err(Error::Layout(format!(
            "min_overlap {min_overlap} must be smaller than patch {patch_size}"
        )));
    }
    Ok(ChunkLayout {
        image_size,
        patch_size,
        starts_y: axis_starts(h, patch_size, min_overlap),
        starts_x: axis_starts(w, patch_size, min_overlap),
        min_overlap,
        blend: BlendMode::Feather,
    })
}

impl ChunkLayout {
    /// Single patch spanning a square image.
    pub fn single(size: usize) -> Self {
        Self {
            image_size: (size, size),
            patch_size: size,
            starts_y: vec![0],
            starts_x: vec![0],
            min_overlap: 0,
            blend: BlendMode::Feather,
        }
    }

    pub fn with_blend(mut self, blend: BlendMode) -> Self {
        self.blend = blend;
        self
    }

    pub fn num_patches(&self) -> usize {
        self.starts_y.len() * self.starts_x.len()
    }

    /// Patch origins in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts_y
            .iter()
            .flat_map(move |&y| self.starts_x.iter().map(move |&x| (y, x)))
    }

    /// Actual overlaps between neighbours along one axis.
    pub fn overlaps(starts: &[usize], patch: usize) -> Vec<usize> {
        starts
            .windows(2)
            .map(|p| (p[0] + patch).saturating_sub(p[1]))
            .collect()
    }

    fn check_image(&self, img: &Tensor) -> Result<usize> {
        let (c, h, w) = img.check_rank3()?;
        if (h, w) != self.image_size {
            return Err(Error::Layout(format!(
                "image {h}x{w} does not match layout {:?}",
                self.image_size
            )));
        }
        Ok(c)
    }

    /// Per-patch, per-axis raw ramp weights (before normalisation).
    fn axis_ramps(starts: &[usize], patch: usize) -> Vec<Vec<f64>> {
        let k = starts.len();
        (0..k)
            .map(|i| {
                let left = if i > 0 {
                    (starts[i - 1] + patch).saturating_sub(starts[i])
                } else {
                    0
                };
                let right = if i + 1 < k {
                    (starts[i] + patch).saturating_sub(starts[i + 1])
                } else {
                    0
                };
                (0..patch)
                    .map(|x| {
                        let up = if left > 0 && x < left {
                            (x as f64 + 0.5) / left as f64
                        } else {
                            1.0
                        };
                        let down = if right > 0 && x >= patch - right {
                            (patch - x) as f64 - 0.5
                        } else {
                            f64::INFINITY
                        };
                        let down = if down.is_finite() {
                            down / right as f64
                        } else {
                            1.0
                        };
                        up.min(down)
                    })
                    .collect()
            })
            .collect()
    }

    /// Sum of raw feather weights at each pixel, `(1, H, W)`.
    pub fn weight_sum(&self) -> Tensor {
        let (h, w) = self.image_size;
        let ry = Self::axis_ramps(&self.starts_y, self.patch_size);
        let rx = Self::axis_ramps(&self.starts_x, self.patch_size);
        let mut sum = Tensor::zeros(&[1, h, w]);
        for (iy, &sy) in self.starts_y.iter().enumerate() {
            for (ix, &sx) in self.starts_x.iter().enumerate() {
                for y in 0..self.patch_size {
                    for x in 0..self.patch_size {
                        let idx = (sy + y) * w + sx + x;
                        sum.data_mut()[idx] += ry[iy][y] * rx[ix][x];
                    }
                }
            }
        }
        sum
    }

    /// Normalised weight field of every patch, in patch coordinates.
    pub fn patch_weights(&self) -> Result<Vec<Tensor>> {
        let (_, w) = self.image_size;
        let ry = Self::axis_ramps(&self.starts_y, self.patch_size);
        let rx = Self::axis_ramps(&self.starts_x, self.patch_size);
        let sum = self.weight_sum();
        let p = self.patch_size;
        let mut out = Vec::with_capacity(self.num_patches());
        for (iy, &sy) in self.starts_y.iter().enumerate() {
            for (ix, &sx) in self.starts_x.iter().enumerate() {
                let mut t = Tensor::zeros(&[1, p, p]);
                for y in 0..p {
                    for x in 0..p {
                        let total = sum.data()[(sy + y) * w + sx + x];
                        if total <= 0.0 {
                            return Err(Error::Internal(
                                "zero blend weight inside coverage".into(),
                            ));
                        }
                        t.data_mut()[y * p + x] = ry[iy][y] * rx[ix][x] / total;
                    }
                }
                out.push(t);
            }
        }
        Ok(out)
    }
}

pub fn extract(image: &Tensor, layout: &ChunkLayout) -> Result<Vec<Tensor>> {
    layout.check_image(image)?;
    let p = layout.patch_size;
    layout
        .origins()
        .map(|(y, x)| image.crop(y, x, p, p))
        .collect()
}

pub fn blend(patches: &[Tensor], layout: &ChunkLayout) -> Result<Tensor> {
    if patches.len() != layout.num_patches() {
        return Err(Error::Layout(format!(
            "expected {} patches, got {}",
            layout.num_patches(),
            patches.len()
        )));
    }
    let p = layout.patch_size;
    let c = patches[0].check_rank3()?.0;
    for t in patches {
        if t.shape() != [c, p, p] {
            return Err(Error::Layout(format!(
                "patch shape {:?} != [{c}, {p}, {p}]",
                t.shape()
            )));
        }
    }
    let (h, w) = layout.image_size;
    let mut out = Tensor::zeros(&[c, h, w]);
    match layout.blend {
        BlendMode::None => {
            for (t, (sy, sx)) in patches.iter().zip(layout.origins()) {
                for ci in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            out.set(ci, sy + y, sx + x, t.at(ci, y, x));
                        }
                    }
                }
            }
        }
        BlendMode::Feather => {
            let weights = layout.patch_weights()?;
            for ((t, wt), (sy, sx)) in patches.iter().zip(&weights).zip(layout.origins()) {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((ci * h) + sy + y) * w + sx;
                        for x in 0..p {
                            out.data_mut()[row + x] += wt.data()[y * p + x] * t.at(ci, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    /// Smallest k whose uniformly spread windows cover `len` with the
    /// required overlap, by enumeration.
    fn brute_min_count(len: usize, patch: usize, min_overlap: usize) -> usize {
        (1..=len)
            .find(|&k| {
                if k == 1 {
                    return patch >= len;
                }
                (k - 1) * (patch - min_overlap) + patch >= len
            })
            .unwrap()
    }

    #[test]
    fn documented_layouts() {
        let l = plan_chunks((224, 224), 224, 32).unwrap();
        assert_eq!(l.num_patches(), 1);
        assert_eq!(l.starts_y, vec![0]);

        let l = plan_chunks((512, 512), 224, 32).unwrap();
        assert_eq!(brute_min_count(512, 224, 32), 3);
        assert_eq!(l.starts_y, vec![0, 144, 288]);
        assert_eq!(l.starts_x, vec![0, 144, 288]);
        assert_eq!(ChunkLayout::overlaps(&l.starts_x, 224), vec![80, 80]);

        let l = plan_chunks((1024, 1024), 518, 8).unwrap();
        assert_eq!(brute_min_count(1024, 518, 8), 2);
        assert_eq!(l.starts_y, vec![0, 506]);
        assert_eq!(ChunkLayout::overlaps(&l.starts_y, 518), vec![12]);
    }

    #[test]
    fn rejects_invalid_requests() {
        assert!(plan_chunks((100, 300), 224, 8).is_err());
        assert!(plan_chunks((300, 300), 224, 224).is_err());
    }

    #[test]
    fn extract_blend_round_trip() {
        let mut rng = seeded_rng(1);
        let img = Tensor::randn(&[3, 96, 80], &mut rng);
        let l = plan_chunks((96, 80), 32, 5).unwrap();
        let patches = extract(&img, &l).unwrap();
        assert_eq!(patches.len(), l.num_patches());
        for (p, (y, x)) in patches.iter().zip(l.origins()) {
            assert_eq!(p, &img.crop(y, x, 32, 32).unwrap());
        }
        let back = blend(&patches, &l).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn constant_patches_blend_to_constant() {
        let l = plan_chunks((512, 512), 224, 32).unwrap();
        let img = Tensor::full(&[1, 512, 512], 0.25);
        let patches = extract(&img, &l).unwrap();
        assert!(patches.iter().all(|p| p.data().iter().all(|&v| v == 0.25)));
        let ones: Vec<_> = (0..9).map(|_| Tensor::full(&[1, 224, 224], 1.0)).collect();
        let out = blend(&ones, &l).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn disagreeing_patches_ramp_monotonically() {
        // Two patches of width 10 on a 16-wide strip: overlap 4 at x in 6..10.
        let l = plan_chunks((10, 16), 10, 2).unwrap();
        assert_eq!(l.starts_x, vec![0, 6]);
        let a = Tensor::full(&[1, 10, 10], 0.0);
        let b = Tensor::full(&[1, 10, 10], 1.0);
        let out = blend(&[a, b], &l).unwrap();
        let row: Vec<f64> = (0..16).map(|x| out.at(0, 3, x)).collect();
        // Hand-computed ramp weights of the right patch: (j + 0.5) / 4.
        let expect = [0.125, 0.375, 0.625, 0.875];
        for (j, e) in expect.iter().enumerate() {
            assert!((row[6 + j] - e).abs() < 1e-12);
        }
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(row[5], 0.0);
        assert_eq!(row[10], 1.0);
    }

    #[test]
    fn layout_serializes() {
        let l = plan_chunks((512, 512), 224, 32).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        let back: ChunkLayout = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }
}
