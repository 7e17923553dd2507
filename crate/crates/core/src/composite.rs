//! Composite biases: learned linear mixtures of normalized kernel scores.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `n × m` mixing matrix; row `i` defines composite `γ_i = Σ_j W_ij ψ̃_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    w: Array2<f64>,
}

impl CompositeWeights {
    pub fn from_matrix(w: Array2<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::Config("composite weights need at least one row and column".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("composite weights must be finite".into()));
        }
        Ok(CompositeWeights { w })
    }

    pub fn identity(n: usize) -> Self {
        CompositeWeights { w: Array2::eye(n) }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        CompositeWeights { w: Array2::zeros((n, m)) }
    }

    /// Number of composites.
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Number of mixed kernel instances.
    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerConfig {
    pub lambda_l1: f64,
    pub lambda_l2: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_l1: 1e-4,
            lambda_l2: 1e-4,
        }
    }
}

impl RegularizerConfig {
    pub const NONE: RegularizerConfig = RegularizerConfig {
        lambda_l1: 0.0,
        lambda_l2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l2 >= 0.0) {
            return Err(Error::Config("regularizer weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// `γ = W · scores`.
pub fn composite_scores(weights: &CompositeWeights, scores: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if scores.len() != weights.m() {
        return Err(Error::DimensionMismatch {
            expected: weights.m(),
            got: scores.len(),
        });
    }
    Ok(weights.w.dot(&scores))
}

/// Penalty `λ1 Σ|W| + λ2 Σ W²` and its (sub)gradient, with `sign(0) = 0`.
pub fn regularizer(weights: &CompositeWeights, cfg: &RegularizerConfig) -> (f64, Array2<f64>) {
    let w = &weights.w;
    let value = cfg.lambda_l1 * w.iter().map(|v| v.abs()).sum::<f64>()
        + cfg.lambda_l2 * w.iter().map(|v| v * v).sum::<f64>();
    let grad = w.mapv(|v| {
        let sign = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        cfg.lambda_l1 * sign + 2.0 * cfg.lambda_l2 * v
    });
    (value, grad)
}

/// Entries i.i.d. uniform in `(−1/√m, 1/√m)`.
pub fn init_weights(n: usize, m: usize, seed: u64) -> Result<CompositeWeights> {
    if n == 0 || m == 0 {
        return Err(Error::Config("composite weights need n, m >= 1".into()));
    }
    let bound = 1.0 / (m as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((n, m), || rng.gen_range(-bound..bound));
    Ok(CompositeWeights { w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_zero_mixing() {
        let s = array![0.3, -0.1, 0.7];
        assert_eq!(composite_scores(&CompositeWeights::identity(3), s.view()).unwrap(), s);
        assert_eq!(
            composite_scores(&CompositeWeights::zeros(2, 3), s.view()).unwrap(),
            array![0.0, 0.0]
        );
        let w = CompositeWeights::from_matrix(array![[0.5, 0.5]]).unwrap();
        assert_eq!(composite_scores(&w, array![1.0, 0.0].view()).unwrap(), array![0.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let w = CompositeWeights::zeros(2, 3);
        assert!(matches!(
            composite_scores(&w, array![1.0].view()),
            Err(Error::DimensionMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn regularizer_closed_forms() {
        let cfg = RegularizerConfig {
            lambda_l1: 1.0,
            lambda_l2: 1.0,
        };
        let (v, g) = regularizer(&CompositeWeights::zeros(2, 2), &cfg);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let w = CompositeWeights::from_matrix(array![[2.0]]).unwrap();
        let (v, g) = regularizer(&w, &cfg);
        assert_eq!(v, 6.0);
        assert_eq!(g[[0, 0]], 5.0);
    }

    #[test]
    fn regularizer_matches_finite_differences_away_from_zero() {
        let cfg = RegularizerConfig {
            lambda_l1: 0.3,
            lambda_l2: 0.7,
        };
        let w = init_weights(4, 5, 17).unwrap();
        let (_, g) = regularizer(&w, &cfg);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                if w.matrix()[[i, j]].abs() < 10.0 * h {
                    continue;
                }
                let mut plus = w.clone();
                plus.matrix_mut()[[i, j]] += h;
                let mut minus = w.clone();
                minus.matrix_mut()[[i, j]] -= h;
                let fd = (regularizer(&plus, &cfg).0 - regularizer(&minus, &cfg).0) / (2.0 * h);
                let rel = (fd - g[[i, j]]).abs() / g[[i, j]].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "({i},{j}) rel {rel}");
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_weights(16, 16, 5).unwrap();
        assert_eq!(a, init_weights(16, 16, 5).unwrap());
        assert!(a.matrix().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn init_std_matches_uniform_moment() {
        // 10^5 draws of U(-1/4, 1/4): std = 0.5 / sqrt(12)
        let w = init_weights(6250, 16, 99).unwrap();
        let n = w.matrix().len() as f64;
        let mean = w.matrix().sum() / n;
        let var = w.matrix().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.5 / 12f64.sqrt()).abs() < 0.005);
    }
}
