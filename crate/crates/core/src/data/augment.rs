//! Random crop, flips and intensity jitter applied jointly to an image and
//! its mask. Geometric operations only move pixels, so mask labels are never
//! interpolated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub flip_prob: f64,
    pub intensity_shift_range: (f64, f64),
    pub intensity_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 32,
            flip_prob: 0.5,
            intensity_shift_range: (-0.05, 0.05),
            intensity_scale_range: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.intensity_shift_range;
        let (k0, k1) = self.intensity_scale_range;
        if self.crop_size == 0 || !(0.0..=1.0).contains(&self.flip_prob) || !(s0 <= s1) || !(k0 <= k1) {
            return Err(Error::InvalidSpec(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_size: usize,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    pub scale: f64,
    pub shift: f64,
}

impl AugmentParams {
    /// Draws crop offset, flips, scale and shift in that order.
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        if cfg.crop_size > height || cfg.crop_size > width {
            return Err(Error::CropTooLarge {
                crop: cfg.crop_size,
                height,
                width,
            });
        }
        let crop_top = rng.below((height - cfg.crop_size + 1) as u64) as usize;
        let crop_left = rng.below((width - cfg.crop_size + 1) as u64) as usize;
        let flip_vertical = rng.bernoulli(cfg.flip_prob);
        let flip_horizontal = rng.bernoulli(cfg.flip_prob);
        let (k0, k1) = cfg.intensity_scale_range;
        let (s0, s1) = cfg.intensity_shift_range;
        let scale = rng.uniform_in(k0, k1);
        let shift = rng.uniform_in(s0, s1);
        Ok(AugmentParams {
            crop_top,
            crop_left,
            crop_size: cfg.crop_size,
            flip_vertical,
            flip_horizontal,
            scale,
            shift,
        })
    }

    /// No crop offset, no flips, unit scale and zero shift.
    pub fn identity(size: usize) -> Self {
        AugmentParams {
            crop_top: 0,
            crop_left: 0,
            crop_size: size,
            flip_vertical: false,
            flip_horizontal: false,
            scale: 1.0,
            shift: 0.0,
        }
    }

    /// Source pixel for output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize) -> (usize, usize) {
        let n = self.crop_size;
        let r = if self.flip_vertical { n - 1 - r } else { r };
        let c = if self.flip_horizontal { n - 1 - c } else { c };
        (self.crop_top + r, self.crop_left + c)
    }

    /// Applies the draw to a `[C, H, W]` image and its `H x W` mask.
    pub fn apply(&self, image: &Tensor, mask: &LabelMask) -> Result<(Tensor, LabelMask)> {
        let d = image.dims();
        if d.len() != 3 || d[1] != mask.height || d[2] != mask.width {
            return Err(Error::ShapeMismatch(format!(
                "image {d:?} vs mask {}x{}",
                mask.height, mask.width
            )));
        }
        let (ch, h, w, n) = (d[0], d[1], d[2], self.crop_size);
        if self.crop_top + n > h || self.crop_left + n > w {
            return Err(Error::CropTooLarge { crop: n, height: h, width: w });
        }
        let mut pixels = Vec::with_capacity(ch * n * n);
        for c in 0..ch {
            let plane = &image.data()[c * h * w..(c + 1) * h * w];
            for r in 0..n {
                for col in 0..n {
                    let (sr, sc) = self.source(r, col);
                    pixels.push(self.scale * plane[sr * w + sc] + self.shift);
                }
            }
        }
        let mut labels = Vec::with_capacity(n * n);
        for r in 0..n {
            for col in 0..n {
                let (sr, sc) = self.source(r, col);
                labels.push(mask.labels[sr * w + sc]);
            }
        }
        let out_mask = LabelMask {
            height: n,
            width: n,
            labels,
            spacing: mask.spacing,
        };
        Ok((Tensor::new(vec![ch, n, n], pixels)?, out_mask))
    }
}

/// Samples a draw from `rng` and applies it.
pub fn augment(image: &Tensor, mask: &LabelMask, cfg: &AugmentConfig, rng: &mut Rng64) -> Result<(Tensor, LabelMask)> {
    let params = AugmentParams::sample(cfg, mask.height, mask.width, rng)?;
    params.apply(image, mask)
}
