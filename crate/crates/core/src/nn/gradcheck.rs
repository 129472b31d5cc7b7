//! Central finite-difference verification of analytic gradients.
//!
//! Shared by the unit tests of every network module and by the acceptance
//! suite; lives in the library so integration tests in other crates can use
//! it unchanged.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Coordinates sampled (all of them if the tensor is smaller).
    pub samples: usize,
    /// Per-coordinate relative-error bound.
    pub tolerance: f64,
    /// Fraction of sampled coordinates that must be within tolerance.
    pub required_pass_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 200,
            tolerance: 1e-3,
            required_pass_fraction: 0.99,
            seed: 0xFD,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel_error: f64,
    pub required_pass_fraction: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        if self.checked == 0 {
            return false;
        }
        let ok = (self.checked - self.failures) as f64 / self.checked as f64;
        ok >= self.required_pass_fraction
    }
}

/// Compare `analytic` against central finite differences of `f` around `x0`
/// at sampled coordinates.
pub fn check_scalar_fn(
    f: &dyn Fn(&Tensor) -> f64,
    x0: &Tensor,
    analytic: &Tensor,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(x0.shape(), analytic.shape(), "gradcheck: shape mismatch");
    let n = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<usize> = if n <= cfg.samples {
        (0..n).collect()
    } else {
        (0..cfg.samples).map(|_| rng.gen_range(0..n)).collect()
    };

    let flat0 = x0.clone().into_shape_with_order(IxDyn(&[n])).unwrap();
    let flat_analytic = analytic.clone().into_shape_with_order(IxDyn(&[n])).unwrap();
    let shape = x0.shape().to_vec();

    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = flat0.clone();
        plus[i] += cfg.step;
        let mut minus = flat0.clone();
        minus[i] -= cfg.step;
        let fp = f(&plus.clone().into_shape_with_order(IxDyn(&shape)).unwrap());
        let fm = f(&minus.into_shape_with_order(IxDyn(&shape)).unwrap());
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = flat_analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
        if rel > cfg.tolerance {
            failures += 1;
        }
    }
    GradCheckReport {
        checked: coords.len(),
        failures,
        worst_rel_error: worst,
        required_pass_fraction: cfg.required_pass_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        // f(x) = sum(x^2), grad = 2x.
        let f = |x: &Tensor| x.iter().map(|v| v * v).sum::<f64>();
        let x0 = arr1(&[0.3, -0.7, 1.2]).into_dyn();
        let good = x0.mapv(|v| 2.0 * v);
        let rep = check_scalar_fn(&f, &x0, &good, &GradCheckConfig::default());
        assert!(rep.pass());

        let bad = x0.mapv(|v| 3.0 * v);
        let rep = check_scalar_fn(&f, &x0, &bad, &GradCheckConfig::default());
        assert!(!rep.pass());
    }
}
