//! Monte-Carlo kernel normalization.
//!
//! A kernel's mean response over the neighborhood ball is estimated from a
//! fixed set of uniform samples and subtracted from its score, so neighbors
//! aligned better than the ball average score positive and the rest negative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kernels::{GibGrad, GibParams, PreparedGib};

/// Default number of Monte-Carlo samples per neighborhood scale.
pub const DEFAULT_MC_SAMPLES: usize = 256;

/// Uniform samples inside the ball of radius `r_ball` centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    samples: Vec<Vec3>,
    r_ball: f64,
    seed: u64,
}

impl McSampleSet {
    pub fn samples(&self) -> &[Vec3] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn r_ball(&self) -> f64 {
        self.r_ball
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Rejection sampling from the enclosing cube with a seeded ChaCha stream.
pub fn make_mc_samples(count: usize, r_ball: f64, seed: u64) -> Result<McSampleSet> {
    if count == 0 {
        return Err(Error::InvalidCount);
    }
    if !(r_ball > 0.0 && r_ball.is_finite()) {
        return Err(Error::NonPositiveRadius(r_ball));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        let u = Vec3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        if u.norm_squared() <= 1.0 {
            samples.push(u * r_ball);
        }
    }
    Ok(McSampleSet { samples, r_ball, seed })
}

/// SplitMix64 finalizer used to derive independent seeds from a global one.
pub fn derive_seed(global: u64, stream: u64) -> u64 {
    let mut z = global ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ω: the summed kernel response over the sample set.
pub fn omega(params: &GibParams, mc: &McSampleSet) -> f64 {
    omega_prepared(&PreparedGib::new(params), mc)
}

pub fn omega_prepared(gib: &PreparedGib, mc: &McSampleSet) -> f64 {
    mc.samples.iter().map(|&y| gib.eval(y)).sum()
}

/// Mean kernel gradient over the sample set, i.e. `∇Ω / M`.
pub fn mean_grad_prepared(gib: &PreparedGib, mc: &McSampleSet) -> GibGrad {
    let mut acc = GibGrad::default();
    for &y in &mc.samples {
        acc.add_scaled(&gib.eval_grad(y).1, 1.0);
    }
    acc.scaled(1.0 / mc.len() as f64)
}

/// `ψ(offset) − Ω / M`.
pub fn normalized_eval(params: &GibParams, offset: Vec3, mc: &McSampleSet) -> f64 {
    let gib = PreparedGib::new(params);
    gib.eval(offset) - omega_prepared(&gib, mc) / mc.len() as f64
}

pub fn normalized_eval_grad(params: &GibParams, offset: Vec3, mc: &McSampleSet) -> (f64, GibGrad) {
    let gib = PreparedGib::new(params);
    let (psi, mut grad) = gib.eval_grad(offset);
    let mean = omega_prepared(&gib, mc) / mc.len() as f64;
    grad.add_scaled(&mean_grad_prepared(&gib, mc), -1.0);
    (psi - mean, grad)
}

/// A kernel bundled with its Monte-Carlo mean for one sample set, so the mean
/// is computed once and shared by every query point.
#[derive(Debug, Clone)]
pub struct NormalizedGib {
    gib: PreparedGib,
    mean: f64,
}

impl NormalizedGib {
    pub fn new(gib: PreparedGib, mc: &McSampleSet) -> Self {
        let mean = omega_prepared(&gib, mc) / mc.len() as f64;
        NormalizedGib { gib, mean }
    }

    pub fn gib(&self) -> &PreparedGib {
        &self.gib
    }

    /// Ω / M.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn eval(&self, offset: Vec3) -> f64 {
        self.gib.eval(offset) - self.mean
    }
}
