//! Robust statistics: MAD scale, innovation outlier detection, the Huber
//! loss/weight pair, and the iteratively reweighted least-squares solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tuning for the Huber M-estimator and its IRLS solver.
#[derive(Debug, Clone, PartialEq)]
pub struct HuberConfig {
    /// Threshold multiplier `c` in `delta = c * sigma_hat` (1.345 gives 95%
    /// efficiency at the Gaussian).
    pub efficiency_constant: f64,
    /// MAD-to-standard-deviation consistency factor (1.4826 at the Gaussian).
    pub mad_consistency_factor: f64,
    /// Iteration cap.
    pub max_iterations: usize,
    /// Convergence threshold on both the objective change and the parameter
    /// change.
    pub convergence_tolerance: f64,
    /// Fixed threshold bypassing the MAD adaptation.
    pub delta_override: Option<f64>,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self {
            efficiency_constant: 1.345,
            mad_consistency_factor: 1.4826,
            max_iterations: 30,
            convergence_tolerance: 1e-5,
            delta_override: None,
        }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency_constant > 0.0)
            || !(self.mad_consistency_factor > 0.0)
            || !(self.convergence_tolerance > 0.0)
        {
            return Err(Error::Validation(
                "Huber constants and tolerance must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        if let Some(d) = self.delta_override {
            if !(d > 0.0) {
                return Err(Error::Validation("delta_override must be positive".into()));
            }
        }
        Ok(())
    }
}

/// IRLS output: solution, final weights and the full objective trace.
#[derive(Debug, Clone)]
pub struct IrlsResult {
    pub theta: DVector<f64>,
    /// Final per-row weights, each in `(0, 1]`.
    pub weights: DVector<f64>,
    /// Reweighting iterations performed.
    pub iterations: usize,
    /// Huber objective after the warm start and after each iteration;
    /// nonincreasing by the majorize-minimize construction.
    pub objective_trace: Vec<f64>,
    /// Whether a convergence test fired before the iteration cap.
    pub converged: bool,
    /// The threshold actually applied.
    pub delta_used: f64,
}

/// Innovation outlier detection outcome.
#[derive(Debug, Clone)]
pub struct OutlierDetection {
    /// Sorted 0-based time indices where any channel exceeded the threshold.
    pub flags: Vec<usize>,
    /// Robust scale estimate per measurement channel.
    pub channel_scales: Vec<f64>,
    /// Set when some channel had zero MAD while containing nonzero values;
    /// that channel flags nothing and the caller should treat the batch with
    /// suspicion.
    pub degenerate_scale: bool,
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    median_of_sorted(&v)
}

/// `factor * median(|x_i - median(x)|)`.
///
/// Even-length medians average the two central order statistics. A zero
/// result is valid (constant input) and left to the caller.
pub fn mad_scale(values: &[f64], factor: f64) -> f64 {
    assert!(!values.is_empty(), "mad_scale of an empty sequence");
    let med = median(values);
    let deviations: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    factor * median(&deviations)
}

/// Flag time indices whose innovation magnitude exceeds
/// `gamma_thr * sigma_hat` with `sigma_hat = 1.4826 * MAD` per channel; a
/// step is flagged when any channel flags it.
pub fn detect_innovation_outliers(
    innovations: &[DVector<f64>],
    gamma_thr: f64,
) -> Result<OutlierDetection> {
    if innovations.len() < 3 {
        return Err(Error::Validation(
            "outlier detection needs at least 3 innovations".into(),
        ));
    }
    if !(gamma_thr > 0.0) {
        return Err(Error::Validation("gamma_thr must be positive".into()));
    }
    let n_z = innovations[0].len();
    let mut flagged = vec![false; innovations.len()];
    let mut channel_scales = Vec::with_capacity(n_z);
    let mut degenerate_scale = false;
    for c in 0..n_z {
        let channel: Vec<f64> = innovations.iter().map(|e| e[c]).collect();
        let scale = mad_scale(&channel, 1.4826);
        channel_scales.push(scale);
        if scale == 0.0 {
            if channel.iter().any(|&v| v != 0.0) {
                degenerate_scale = true;
            }
            continue; // cannot threshold against a zero scale
        }
        let threshold = gamma_thr * scale;
        for (k, &v) in channel.iter().enumerate() {
            if v.abs() > threshold {
                flagged[k] = true;
            }
        }
    }
    let flags = flagged
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(k, _)| k)
        .collect();
    Ok(OutlierDetection {
        flags,
        channel_scales,
        degenerate_scale,
    })
}

/// Huber loss: quadratic inside `delta`, linear outside.
pub fn huber_loss(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Huber weight `psi(r)/r`: 1 inside `delta`, `delta/|r|` outside.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

fn huber_objective(residuals: &DVector<f64>, delta: f64) -> f64 {
    residuals.iter().map(|&r| huber_loss(r, delta)).sum()
}

/// Solve `min_theta sum_i huber(b_i - A_i theta, delta)` by iteratively
/// reweighted least squares.
///
/// The warm start defaults to the OLS solution when `theta0` is `None`.
/// Unless overridden, `delta = c * mad_scale(r0)` is fixed once from the
/// warm-start residuals. Each iteration solves the weighted problem through
/// a factorization of `W^{1/2} A` and stops when either the objective change
/// or the max-norm parameter change drops below the tolerance.
pub fn irls_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    config: &HuberConfig,
    theta0: Option<&DVector<f64>>,
) -> Result<IrlsResult> {
    config.validate()?;
    if a.nrows() != b.len() {
        return Err(Error::Validation(format!(
            "A has {} rows but b has length {}",
            a.nrows(),
            b.len()
        )));
    }
    let ls = linalg::lstsq(a, b)?;
    if ls.rank < a.ncols() {
        return Err(Error::Numerical(format!(
            "IRLS requires full column rank: rank {} of {}",
            ls.rank,
            a.ncols()
        )));
    }
    let mut theta = match theta0 {
        Some(t) => {
            if t.len() != a.ncols() {
                return Err(Error::Validation("theta0 has wrong length".into()));
            }
            t.clone()
        }
        None => ls.solution,
    };

    let initial_residuals = b - a * &theta;
    let delta_used = match config.delta_override {
        Some(d) => d,
        None => {
            let r0: Vec<f64> = initial_residuals.iter().copied().collect();
            let d = config.efficiency_constant * mad_scale(&r0, config.mad_consistency_factor);
            if d > 0.0 {
                d
            } else {
                // all warm-start residuals identical: any positive threshold
                // makes every weight 1 and IRLS reduces to OLS
                let fallback = 1e-12f64.max(1e-6 * b.amax());
                fallback
            }
        }
    };

    let mut objective_trace = vec![huber_objective(&initial_residuals, delta_used)];
    let mut weights = DVector::from_element(b.len(), 1.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        iterations += 1;
        let residuals = b - a * &theta;
        for (i, r) in residuals.iter().enumerate() {
            weights[i] = huber_weight(*r, delta_used);
        }
        let sqrt_w = weights.map(f64::sqrt);
        let mut aw = a.clone();
        let mut bw = b.clone();
        for i in 0..b.len() {
            let s = sqrt_w[i];
            bw[i] *= s;
            for j in 0..a.ncols() {
                aw[(i, j)] *= s;
            }
        }
        let step = linalg::lstsq(&aw, &bw)?;
        if step.rank < a.ncols() {
            return Err(Error::Numerical(
                "weighted normal matrix is singular".into(),
            ));
        }
        let theta_next = step.solution;
        let objective = huber_objective(&(b - a * &theta_next), delta_used);
        let delta_theta = (&theta_next - &theta).amax();
        let delta_objective = (objective - objective_trace.last().unwrap()).abs();
        theta = theta_next;
        objective_trace.push(objective);
        if delta_objective < config.convergence_tolerance
            || delta_theta < config.convergence_tolerance
        {
            converged = true;
            break;
        }
    }

    Ok(IrlsResult {
        theta,
        weights,
        iterations,
        objective_trace,
        converged,
        delta_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::als::ols_solve;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dv(values: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(values)
    }

    fn randn(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn scalar_innovations(values: &[f64]) -> Vec<DVector<f64>> {
        values.iter().map(|&v| DVector::from_element(1, v)).collect()
    }

    #[test]
    fn mad_scale_direct_cases() {
        assert_relative_eq!(
            mad_scale(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.4826),
            1.4826,
            epsilon = 1e-12
        );
        assert_eq!(mad_scale(&[5.0, 5.0, 5.0], 1.4826), 0.0);
        // even length: medians average the central pair
        assert_relative_eq!(mad_scale(&[1.0, 2.0, 3.0, 4.0], 1.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mad_scale_is_gaussian_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sample: Vec<f64> = (0..100_000).map(|_| 2.0 * randn(&mut rng)).collect();
        let s = mad_scale(&sample, 1.4826);
        assert!((s - 2.0).abs() / 2.0 < 0.03, "scale {s}");
    }

    #[test]
    fn detector_flags_the_spike() {
        let e = scalar_innovations(&[0.1, -0.2, 0.15, 10.0, -0.05]);
        let det = detect_innovation_outliers(&e, 3.5).unwrap();
        assert_relative_eq!(det.channel_scales[0], 1.4826 * 0.15, epsilon = 1e-12);
        assert_eq!(det.flags, vec![3]);
        assert!(!det.degenerate_scale);
    }

    #[test]
    fn detector_degenerate_cases() {
        let zeros = scalar_innovations(&[0.0, 0.0, 0.0, 0.0]);
        let det = detect_innovation_outliers(&zeros, 3.5).unwrap();
        assert!(det.flags.is_empty());
        assert!(!det.degenerate_scale);

        // zero MAD but nonzero values: flag nothing, warn
        let spiky = scalar_innovations(&[1.0, 1.0, 1.0, 1.0, 9.0]);
        let det = detect_innovation_outliers(&spiky, 3.5).unwrap();
        assert!(det.flags.is_empty());
        assert!(det.degenerate_scale);

        assert!(detect_innovation_outliers(&scalar_innovations(&[1.0, 2.0]), 3.5).is_err());
    }

    #[test]
    fn multichannel_union_rule() {
        let e = vec![
            dv(&[0.1, 0.1]),
            dv(&[-0.2, 0.2]),
            dv(&[0.15, -0.1]),
            dv(&[0.05, 50.0]), // only channel 2 spikes
            dv(&[-0.1, 0.05]),
        ];
        let det = detect_innovation_outliers(&e, 3.5).unwrap();
        assert_eq!(det.flags, vec![3]);
        assert_eq!(det.channel_scales.len(), 2);
    }

    #[test]
    fn huber_loss_and_weight_branches() {
        assert_relative_eq!(huber_loss(1.0, 2.0), 0.5);
        assert_relative_eq!(huber_loss(3.0, 1.0), 2.5);
        // continuity at the knee
        assert_relative_eq!(huber_loss(2.0, 2.0), 2.0);
        assert_relative_eq!(huber_loss(2.0 + 1e-12, 2.0), 2.0, epsilon = 1e-9);

        assert_relative_eq!(huber_weight(0.5, 1.0), 1.0);
        assert_relative_eq!(huber_weight(2.0, 1.0), 0.5);
        assert!(huber_weight(1e12, 1.0) > 0.0);
    }

    #[test]
    fn irls_reduces_to_ols_when_delta_large() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = dv(&[1.0, 2.1, 2.9, 4.2]);
        let config = HuberConfig {
            delta_override: Some(1e9),
            ..HuberConfig::default()
        };
        let irls = irls_solve(&a, &b, &config, None).unwrap();
        let ols = ols_solve(&a, &b).unwrap();
        assert!((irls.theta - &ols.theta).norm() < 1e-10);
        assert!(irls.iterations <= 2);
        assert!(irls.converged);
        assert!(irls.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn irls_downweights_gross_outlier() {
        // scalar location problem: three ones and one 101
        let a = DMatrix::from_element(4, 1, 1.0);
        let b = dv(&[1.0, 1.0, 1.0, 101.0]);
        let config = HuberConfig {
            delta_override: Some(1.0),
            max_iterations: 200,
            convergence_tolerance: 1e-12,
            ..HuberConfig::default()
        };
        let irls = irls_solve(&a, &b, &config, Some(&DVector::zeros(1))).unwrap();

        // brute-force fixed point of theta = (3 + w * 101) / (3 + w),
        // w = 1 / |101 - theta| (the outlier stays in the linear branch)
        let mut theta_fp = 0.0f64;
        for _ in 0..10_000 {
            let w = (1.0 / (101.0 - theta_fp).abs()).min(1.0);
            theta_fp = (3.0 + w * 101.0) / (3.0 + w);
        }
        assert_relative_eq!(irls.theta[0], theta_fp, epsilon = 1e-6);
        assert!(irls.theta[0] < 2.0, "outlier not rejected: {}", irls.theta[0]);
        // OLS would give the contaminated mean 26
        assert_relative_eq!(ols_solve(&a, &b).unwrap().theta[0], 26.0, epsilon = 1e-10);
        assert!(irls.weights[3] < 0.02);
    }

    #[test]
    fn irls_monotone_descent_on_random_contaminated_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let rows = rng.random_range(8..40usize);
            let cols = rng.random_range(1..4usize);
            let a = DMatrix::from_iterator(
                rows,
                cols,
                (0..rows * cols).map(|_| randn(&mut rng)),
            );
            let truth = DVector::from_iterator(cols, (0..cols).map(|_| randn(&mut rng)));
            let mut b = &a * &truth;
            for i in 0..rows {
                b[i] += 0.1 * randn(&mut rng);
                if rng.random::<f64>() < 0.2 {
                    b[i] += 30.0 * randn(&mut rng);
                }
            }
            let irls = irls_solve(&a, &b, &HuberConfig::default(), None).unwrap();
            for w in irls.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                    "objective increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
            assert!(irls.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
        }
    }

    #[test]
    fn irls_constant_residual_fallback() {
        // theta0 = 0 makes every initial residual equal: MAD = 0, fall back
        let a = DMatrix::from_element(5, 1, 1.0);
        let b = DVector::from_element(5, 2.0);
        let irls = irls_solve(&a, &b, &HuberConfig::default(), Some(&DVector::zeros(1))).unwrap();
        assert!(irls.delta_used > 0.0);
        assert_relative_eq!(irls.theta[0], 2.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn weight_in_unit_interval(r in -1e6..1e6f64, delta in 1e-6..1e3f64) {
            let w = huber_weight(r, delta);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert_eq!(w == 1.0, r.abs() <= delta);
        }

        #[test]
        fn loss_branches_agree_at_knee(delta in 1e-6..1e3f64) {
            let quad = 0.5 * delta * delta;
            let lin = delta * (delta - 0.5 * delta);
            prop_assert!((quad - lin).abs() < 1e-9 * quad.max(1.0));
            prop_assert!((huber_loss(delta, delta) - quad).abs() < 1e-12 * quad.max(1.0));
            prop_assert!((huber_loss(-delta, delta) - quad).abs() < 1e-12 * quad.max(1.0));
        }

        #[test]
        fn flag_set_is_scale_invariant(
            scale in 1e-3..1e3f64,
            values in proptest::collection::vec(-10.0..10.0f64, 5..40)
        ) {
            let base = scalar_innovations(&values);
            let scaled: Vec<DVector<f64>> =
                values.iter().map(|&v| DVector::from_element(1, v * scale)).collect();
            let a = detect_innovation_outliers(&base, 3.5).unwrap();
            let b = detect_innovation_outliers(&scaled, 3.5).unwrap();
            prop_assert_eq!(a.flags, b.flags);
        }

        #[test]
        fn irls_is_permutation_equivariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 12;
            let a = DMatrix::from_iterator(
                rows, 2, (0..rows * 2).map(|_| randn(&mut rng)));
            let b = DVector::from_iterator(
                rows, (0..rows).map(|_| 5.0 * randn(&mut rng)));
            let perm: Vec<usize> = {
                // deterministic rotation keeps the test cheap
                (0..rows).map(|i| (i + 5) % rows).collect()
            };
            let mut ap = DMatrix::zeros(rows, 2);
            let mut bp = DVector::zeros(rows);
            for (dst, &src) in perm.iter().enumerate() {
                ap.set_row(dst, &a.row(src));
                bp[dst] = b[src];
            }
            let plain = irls_solve(&a, &b, &HuberConfig::default(), None).unwrap();
            let permuted = irls_solve(&ap, &bp, &HuberConfig::default(), None).unwrap();
            prop_assert!((plain.theta - &permuted.theta).norm() < 1e-8);
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((plain.weights[src] - permuted.weights[dst]).abs() < 1e-8);
            }
        }
    }
}
