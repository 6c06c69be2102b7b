//! Seedable random streams.
//!
//! Every stream is a ChaCha8 generator seeded with `seed_from_u64` and
//! positioned on a 64-bit ChaCha stream id. Uniform and normal variates are
//! derived from raw `u64` words here (53-bit mantissa uniforms, Box-Muller
//! normals) so the sequences do not depend on `rand` distribution internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Purpose offsets added to the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Augment = 2,
    Data = 3,
}

pub fn derive_seed(root: u64, purpose: Purpose) -> u64 {
    root.wrapping_add(purpose as u64)
}

#[derive(Clone, Debug)]
pub struct Rng64 {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng64 {
            inner,
            spare_normal: None,
        }
    }

    pub fn for_purpose(root: u64, purpose: Purpose, stream: u64) -> Self {
        Self::with_stream(derive_seed(root, purpose), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal truncated to +-2 standard deviations by rejection.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn normal_tensor(&mut self, dims: &[usize], std: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.normal() * std).collect();
        Tensor::new(dims.to_vec(), data).expect("valid dims")
    }

    pub fn uniform_tensor(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.uniform_in(lo, hi)).collect();
        Tensor::new(dims.to_vec(), data).expect("valid dims")
    }
}
