//! Synthetic segmentation images made of ellipses and rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::rng::{Purpose, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub num_images: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Intensity range per class, background (class 0) first.
    pub intensity: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 32,
            num_classes: 2,
            num_images: 8,
            shapes_per_image: (1, 3),
            intensity: vec![(0.0, 0.2), (0.6, 1.0)],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.image_size < 4 {
            return fail(format!("image size {} below 4", self.image_size));
        }
        if !(2..=256).contains(&self.num_classes) {
            return fail(format!("class count {} outside 2..=256", self.num_classes));
        }
        if self.num_images == 0 {
            return fail("no images requested".into());
        }
        let (lo, hi) = self.shapes_per_image;
        if lo > hi {
            return fail(format!("shape count range {lo}..={hi} is empty"));
        }
        if self.intensity.len() != self.num_classes {
            return fail(format!(
                "{} intensity ranges for {} classes",
                self.intensity.len(),
                self.num_classes
            ));
        }
        if self.intensity.iter().any(|&(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return fail(format!("invalid intensity ranges {:?}", self.intensity));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    /// Also requires the image size to be a multiple of `divisor`.
    pub fn validate_for(&self, divisor: usize) -> Result<()> {
        self.validate()?;
        if divisor == 0 || self.image_size % divisor != 0 {
            return Err(Error::InvalidSpec(format!(
                "image size {} not divisible by {divisor}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// An analytic shape in pixel coordinates, where pixel `(r, c)` has its
/// centre at `(r + 0.5, c + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Rotated ellipse: centre, semi-axes and rotation in radians.
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    /// Axis-aligned half-open box `[y0, y1) x [x0, x1)`.
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self.kind {
            ShapeKind::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            ShapeKind::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

/// Paints shapes in order (later shapes cover earlier ones) onto a
/// background of class 0.
pub fn rasterize(shapes: &[Shape], size: usize) -> Vec<u8> {
    let mut labels = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            for s in shapes {
                if s.contains(y, x) {
                    labels[r * size + c] = s.class;
                }
            }
        }
    }
    labels
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    /// `[1, H, W]`
    pub image: Tensor,
    pub mask: LabelMask,
    pub shapes: Vec<Shape>,
    /// Intensity assigned to each class before noise.
    pub class_intensity: Vec<f64>,
}

fn random_shape(rng: &mut Rng64, size: f64, classes: usize) -> Shape {
    let class = 1 + rng.below(classes as u64 - 1) as u8;
    let cy = rng.uniform_in(0.2 * size, 0.8 * size);
    let cx = rng.uniform_in(0.2 * size, 0.8 * size);
    let kind = if rng.bernoulli(0.5) {
        ShapeKind::Ellipse {
            cy,
            cx,
            ry: rng.uniform_in(0.1 * size, 0.3 * size),
            rx: rng.uniform_in(0.1 * size, 0.3 * size),
            angle: rng.uniform_in(0.0, std::f64::consts::PI),
        }
    } else {
        let hy = rng.uniform_in(0.08 * size, 0.25 * size);
        let hx = rng.uniform_in(0.08 * size, 0.25 * size);
        ShapeKind::Rect {
            y0: cy - hy,
            x0: cx - hx,
            y1: cy + hy,
            x1: cx + hx,
        }
    };
    Shape { kind, class }
}

/// Image `index` of the dataset described by `spec`. Each image draws from
/// its own stream, so images can be produced in any order.
pub fn generate_image(spec: &SyntheticSpec, index: usize) -> Result<SyntheticImage> {
    spec.validate()?;
    let mut rng = Rng64::for_purpose(spec.seed, Purpose::Data, index as u64);
    let size = spec.image_size;
    let (lo, hi) = spec.shapes_per_image;
    let count = lo + rng.below((hi - lo + 1) as u64) as usize;
    let shapes: Vec<Shape> = (0..count)
        .map(|_| random_shape(&mut rng, size as f64, spec.num_classes))
        .collect();
    let class_intensity: Vec<f64> = spec
        .intensity
        .iter()
        .map(|&(a, b)| rng.uniform_in(a, b))
        .collect();
    let labels = rasterize(&shapes, size);
    let data = labels
        .iter()
        .map(|&l| {
            let base = class_intensity[l as usize];
            if spec.noise_sigma > 0.0 {
                base + spec.noise_sigma * rng.normal()
            } else {
                base
            }
        })
        .collect();
    Ok(SyntheticImage {
        image: Tensor::new(vec![1, size, size], data)?,
        mask: LabelMask::new(size, size, labels)?,
        shapes,
        class_intensity,
    })
}

/// All images of a dataset in index order.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    (0..spec.num_images).map(|i| generate_image(spec, i)).collect()
}
