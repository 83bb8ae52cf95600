//! DP-SGD mechanics: per-example clipping plus Gaussian noise. No
//! privacy accounting, just the gradient transformation.

use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_sigma: f64,
}

/// Clip each per-example gradient to L2 norm `clip_norm`, sum, add
/// `N(0, sigma^2 * clip_norm^2)` per coordinate, and average over the
/// batch. Returns the aggregated update.
pub fn dp_sgd_step<S: Scalar>(
    per_example: &[Vec<S>],
    clip_norm: f64,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<S> {
    assert!(!per_example.is_empty(), "dp_sgd_step needs at least one example");
    let dim = per_example[0].len();
    let c = S::of(clip_norm);
    let mut sum = vec![S::zero(); dim];
    for g in per_example {
        assert_eq!(g.len(), dim, "per-example gradient dim mismatch");
        let norm: S = g.iter().map(|&x| x * x).sum::<S>().sqrt();
        let scale = if norm > c { c / norm } else { S::one() };
        for (s, &x) in sum.iter_mut().zip(g) {
            *s += x * scale;
        }
    }
    let noise = Normal::new(0.0, noise_sigma * clip_norm).expect("valid noise std");
    let inv_b = S::one() / S::of_usize(per_example.len());
    for s in sum.iter_mut() {
        let z = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        *s = (*s + S::of(z)) * inv_b;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sigma_zero_small_norms_is_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vec![0.1f64, 0.2, -0.1];
        let b = vec![-0.3f64, 0.1, 0.2];
        let out = dp_sgd_step(&[a.clone(), b.clone()], 10.0, 0.0, &mut rng);
        for (o, (x, y)) in out.iter().zip(a.iter().zip(&b)) {
            assert!((o - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_bounds_single_example_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 1.0;
        let g = vec![2.0f64, 0.0, 0.0]; // norm 2C
        let out = dp_sgd_step(&[g], c, 0.0, &mut rng);
        let norm: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= c + 1e-12, "update norm {norm} exceeds clip {c}");
        assert!((norm - c).abs() < 1e-12, "fully clipped to the boundary");
    }

    #[test]
    fn noise_std_matches_sigma_c_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = 1.5;
        let c = 2.0;
        let batch = 4usize;
        let zeros = vec![vec![0.0f64; 1]; batch];
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| dp_sgd_step(&zeros, c, sigma, &mut rng)[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let expected = sigma * c / batch as f64;
        let rel = (var.sqrt() - expected).abs() / expected;
        assert!(rel < 0.05, "empirical std off by {:.1}%", rel * 100.0);
    }
}
