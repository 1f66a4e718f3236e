use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_h: bool,
    pub flip_v: bool,
    pub max_rotate_deg: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h: true,
            flip_v: true,
            max_rotate_deg: 30.0,
            scale_range: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    /// No flips, rotation or scaling.
    pub fn none() -> Self {
        AugmentConfig {
            flip_h: false,
            flip_v: false,
            max_rotate_deg: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid!("scale range [{lo}, {hi}] must be positive and ordered"));
        }
        if !(self.max_rotate_deg >= 0.0 && self.max_rotate_deg.is_finite()) {
            return Err(invalid!("max_rotate_deg must be finite and non-negative"));
        }
        Ok(())
    }
}

/// A concrete geometric transform. Flips are applied first, then rotation and
/// scaling about the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip_h: false,
        flip_v: false,
        angle_deg: 0.0,
        scale: 1.0,
    };

    /// Draws flips, angle and scale in that order.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Transform {
        let flip_h = rng.random_bool(0.5) && cfg.flip_h;
        let flip_v = rng.random_bool(0.5) && cfg.flip_v;
        let a = cfg.max_rotate_deg;
        let angle_deg = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let [lo, hi] = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Transform {
            flip_h,
            flip_v,
            angle_deg,
            scale,
        }
    }

    fn flip(&self, t: &Tensor) -> Tensor {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = if self.flip_v { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if self.flip_h { w - 1 - x } else { x };
                    out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    }

    /// Source coordinates for every output pixel, or `None` for an identity warp.
    fn source_coords(&self, h: usize, w: usize) -> Option<Vec<(f64, f64)>> {
        if self.angle_deg == 0.0 && self.scale == 1.0 {
            return None;
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let mut coords = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // Inverse of: rotate by angle, then scale.
                let sx = (c * dx + s * dy) / self.scale + cx;
                let sy = (-s * dx + c * dy) / self.scale + cy;
                coords.push((sy, sx));
            }
        }
        Some(coords)
    }

    /// Applies the transform to an image `[C, H, W]` and mask `[1, H, W]`.
    pub fn apply(&self, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        if image.shape().len() != 3 || mask.shape().len() != 3 || mask.shape()[0] != 1 {
            return Err(shape_err!("augment expects [C,H,W] image and [1,H,W] mask, got {:?} and {:?}", image.shape(), mask.shape()));
        }
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(shape_err!("image {:?} and mask {:?} differ spatially", image.shape(), mask.shape()));
        }
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let (img, msk) = (self.flip(image), self.flip(mask));
        let Some(coords) = self.source_coords(h, w) else {
            return Ok((img, msk));
        };
        let at = |data: &[f64], ch: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                data[(ch * h + y as usize) * w + x as usize]
            }
        };
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for (i, &(sy, sx)) in coords.iter().enumerate() {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let d = img.data();
                out[ch * h * w + i] = (1.0 - fy) * ((1.0 - fx) * at(d, ch, y0, x0) + fx * at(d, ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(d, ch, y0 + 1, x0) + fx * at(d, ch, y0 + 1, x0 + 1));
            }
        }
        let mask_out: Vec<f64> = coords
            .iter()
            .map(|&(sy, sx)| {
                let v = at(msk.data(), 0, sy.round() as isize, sx.round() as isize);
                if v >= 0.5 { 1.0 } else { 0.0 }
            })
            .collect();
        Ok((Tensor::new(vec![c, h, w], out)?, Tensor::new(vec![1, h, w], mask_out)?))
    }
}

/// Samples a transform from `cfg` and applies it to both tensors.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, mask: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    Transform::sample(cfg, rng).apply(image, mask)
}
