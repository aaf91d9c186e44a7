//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

mod suite;

pub use suite::{run_suite, LOSS_TOLERANCE, OP_TOLERANCE, PROBES};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Outcome of one named gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn new(name: impl Into<String>, analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        Self {
            name: name.into(),
            checked: analytic.len(),
            rel_err: relative_error(analytic, numeric),
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

/// Central differences of `f` at `x` for the coordinates in `indices`.
pub fn finite_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Up to `k` distinct indices below `n`, sorted, drawn deterministically.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let f = |x: &[f64]| x[0].powi(3) + 2.0 * x[1];
        let fd = finite_difference(f, &[2.0, 5.0], &[0, 1], FD_STEP);
        assert!(relative_error(&[12.0, 2.0], &fd) < 1e-8);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[-1.0]), 2.0);
    }

    #[test]
    fn indices_are_distinct_and_sorted() {
        let idx = sample_indices(100, 10, 3);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }
}
