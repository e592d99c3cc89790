//! Linear time-invariant state-space models and trajectory simulation.
//!
//! State:       `x_{k+1} = F x_k + Gw w_k`,  `w_k ~ N(0, Q)`
//! Measurement: `z_k = H x_k + v_k`,         `v_k ~ N(0, R)`
//!
//! Measurements can optionally be contaminated with additive outliers: with
//! probability `epsilon` a step receives an extra `gamma_k ~ N(0, omega^2 R)`.
//!
//! All randomness comes from a ChaCha8 stream cipher generator seeded from a
//! caller-supplied 64-bit seed, so identical inputs produce bit-identical
//! trajectories on every platform.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;

/// An LTI state-space model `(F, Gw, H)`.
///
/// `Gw` maps the process noise into the state, so the process noise
/// covariance `Q` is `n_w x n_w` and the state receives `Gw Q Gw^T`. With
/// `Gw = I` this is the plain `x_{k+1} = F x_k + w_k` form.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    f: DMatrix<f64>,
    gw: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl StateSpaceModel {
    /// Build a model, checking that all dimensions are mutually consistent.
    pub fn new(f: DMatrix<f64>, gw: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let n_x = f.nrows();
        if n_x == 0 || f.ncols() != n_x {
            return Err(Error::Validation(format!(
                "F must be square and non-empty, got {}x{}",
                f.nrows(),
                f.ncols()
            )));
        }
        if gw.nrows() != n_x || gw.ncols() == 0 {
            return Err(Error::Validation(format!(
                "Gw must be {}x(n_w>0), got {}x{}",
                n_x,
                gw.nrows(),
                gw.ncols()
            )));
        }
        if h.ncols() != n_x || h.nrows() == 0 {
            return Err(Error::Validation(format!(
                "H must be (n_z>0)x{}, got {}x{}",
                n_x,
                h.nrows(),
                h.ncols()
            )));
        }
        for (name, m) in [("F", &f), ("Gw", &gw), ("H", &h)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
        }
        Ok(Self { f, gw, h })
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn gw(&self) -> &DMatrix<f64> {
        &self.gw
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// State dimension.
    pub fn n_x(&self) -> usize {
        self.f.nrows()
    }

    /// Process-noise dimension.
    pub fn n_w(&self) -> usize {
        self.gw.ncols()
    }

    /// Measurement dimension.
    pub fn n_z(&self) -> usize {
        self.h.nrows()
    }
}

/// The noise covariance pair `(Q, R)`.
///
/// `Q` is `n_w x n_w`, `R` is `n_z x n_z`. Construction checks symmetry;
/// positive semidefiniteness is enforced where the covariances are consumed
/// (simulation, gain computation), because intermediate estimates produced by
/// an unconstrained regression may be indefinite until projected.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariances {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl NoiseCovariances {
    /// Build the pair, rejecting non-square or asymmetric (beyond `1e-12`
    /// relative) matrices.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if m.nrows() != m.ncols() || m.nrows() == 0 {
                return Err(Error::Validation(format!(
                    "{name} must be square and non-empty, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
            let asym = linalg::relative_asymmetry(m);
            if asym > 1e-12 {
                return Err(Error::Validation(format!(
                    "{name} is asymmetric (relative asymmetry {asym:.3e})"
                )));
            }
        }
        Ok(Self { q, r })
    }

    /// Scalar convenience constructor.
    pub fn scalar(q: f64, r: f64) -> Self {
        Self {
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
        }
    }

    /// True when both matrices are PSD within `-1e-10 * trace`.
    pub fn is_psd(&self) -> bool {
        for m in [&self.q, &self.r] {
            let tol = 1e-10 * m.trace().abs().max(1e-300);
            if linalg::min_eigenvalue(m) < -tol {
                return false;
            }
        }
        true
    }
}

/// Additive measurement-outlier model: with probability `epsilon` a step
/// receives an extra perturbation `N(0, omega^2 R)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    pub omega: f64,
}

impl ContaminationSpec {
    pub fn new(epsilon: f64, omega: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Validation(format!(
                "epsilon must be in [0, 1), got {epsilon}"
            )));
        }
        if !(omega > 0.0) {
            return Err(Error::Validation(format!(
                "omega must be positive, got {omega}"
            )));
        }
        Ok(Self { epsilon, omega })
    }
}

/// A simulated trajectory: states, measurements and per-step outlier flags.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    /// True states `x_1 .. x_T` (the supplied `x0` is the state at time 0).
    pub states: Vec<DVector<f64>>,
    /// Measurements `z_1 .. z_T`.
    pub measurements: Vec<DVector<f64>>,
    /// `true` where an outlier perturbation was added.
    pub outlier_flags: Vec<bool>,
    /// Seed the trajectory was generated from.
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The final state, for continuing a trajectory across phases.
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has length >= 1")
    }
}

/// Stability / consistency report for a model.
#[derive(Debug, Clone, Copy)]
pub struct ModelValidation {
    /// Spectral radius of `F`.
    pub spectral_radius: f64,
    /// `rho(F) < 1`.
    pub stable: bool,
}

/// Report the spectral radius of `F` and whether the model is asymptotically
/// stable. Dimension consistency is already enforced by
/// [`StateSpaceModel::new`], so an existing model can only fail on stability.
pub fn validate_model(model: &StateSpaceModel) -> ModelValidation {
    let rho = linalg::spectral_radius(model.f());
    ModelValidation {
        spectral_radius: rho,
        stable: rho < 1.0,
    }
}

/// Simulate `length` steps from `x0` (the state at time 0), optionally with
/// measurement contamination.
///
/// Per step the generator is consumed in a fixed order: `n_w` normals for
/// `w_k`, `n_z` normals for `v_k`, then (only when `contamination` is given)
/// one uniform for the Bernoulli outlier draw and, on a hit, `n_z` normals
/// for the perturbation. Running the same seed with a different `omega`
/// therefore yields the same flag pattern, which is how the flag/measurement
/// consistency tests operate.
pub fn simulate(
    model: &StateSpaceModel,
    noise: &NoiseCovariances,
    contamination: Option<&ContaminationSpec>,
    x0: &DVector<f64>,
    length: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if x0.len() != model.n_x() {
        return Err(Error::Validation(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            model.n_x()
        )));
    }
    if noise.q.nrows() != model.n_w() || noise.r.nrows() != model.n_z() {
        return Err(Error::Validation(format!(
            "noise dimensions ({}, {}) do not match model ({}, {})",
            noise.q.nrows(),
            noise.r.nrows(),
            model.n_w(),
            model.n_z()
        )));
    }
    if length == 0 {
        return Err(Error::Validation("length must be >= 1".into()));
    }
    let validation = validate_model(model);
    if !validation.stable {
        return Err(Error::Numerical(format!(
            "model is unstable: rho(F) = {:.6}",
            validation.spectral_radius
        )));
    }

    let lq = linalg::psd_factor(&noise.q)?;
    let lr = linalg::psd_factor(&noise.r)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_w = model.n_w();
    let n_z = model.n_z();
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
    };

    let mut x = x0.clone();
    let mut states = Vec::with_capacity(length);
    let mut measurements = Vec::with_capacity(length);
    let mut outlier_flags = Vec::with_capacity(length);

    for _ in 0..length {
        let w = &lq * draw(&mut rng, n_w);
        x = model.f() * &x + model.gw() * w;
        let v = &lr * draw(&mut rng, n_z);
        let mut z = model.h() * &x + v;
        let mut flagged = false;
        if let Some(c) = contamination {
            if rng.random::<f64>() < c.epsilon {
                flagged = true;
                z += c.omega * (&lr * draw(&mut rng, n_z));
            }
        }
        states.push(x.clone());
        measurements.push(z);
        outlier_flags.push(flagged);
    }

    Ok(TrajectoryBatch {
        states,
        measurements,
        outlier_flags,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn third_order() -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0, 0.3]),
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn validate_reports_spectral_radius() {
        let m = StateSpaceModel::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(&[0.1, 0.2, 0.3])),
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let rep = validate_model(&m);
        assert_relative_eq!(rep.spectral_radius, 0.3, epsilon = 1e-12);
        assert!(rep.stable);

        let unit = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let rep = validate_model(&unit);
        assert_relative_eq!(rep.spectral_radius, 1.0, epsilon = 1e-12);
        assert!(!rep.stable);

        let nilpotent = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let rep = validate_model(&nilpotent);
        assert!(rep.spectral_radius < 1e-12);
        assert!(rep.stable);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = StateSpaceModel::new(
            DMatrix::identity(3, 3).scale(0.1),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.0]),
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_noise_gives_deterministic_recursion() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(0.0, 0.0);
        let x0 = DVector::from_row_slice(&[1.0, 1.0, 1.0]);
        let traj = simulate(&model, &noise, None, &x0, 20, 7).unwrap();
        let mut x = x0.clone();
        for k in 0..20 {
            x = model.f() * &x;
            assert_relative_eq!(traj.states[k], x, epsilon = 1e-14);
            assert_relative_eq!(traj.measurements[k], model.h() * &x, epsilon = 1e-14);
            assert!(!traj.outlier_flags[k]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let contamination = ContaminationSpec::new(0.15, 8.0).unwrap();
        let x0 = DVector::zeros(3);
        let a = simulate(&model, &noise, Some(&contamination), &x0, 500, 42).unwrap();
        let b = simulate(&model, &noise, Some(&contamination), &x0, 500, 42).unwrap();
        for k in 0..500 {
            assert_eq!(a.states[k], b.states[k]);
            assert_eq!(a.measurements[k], b.measurements[k]);
            assert_eq!(a.outlier_flags[k], b.outlier_flags[k]);
        }
        let c = simulate(&model, &noise, Some(&contamination), &x0, 500, 43).unwrap();
        assert_ne!(a.measurements[0], c.measurements[0]);
    }

    #[test]
    fn flag_fraction_matches_bernoulli_rate() {
        // 3 sigma of a Bernoulli(0.15) proportion at T = 1e5:
        // 0.15 +- 3 * sqrt(0.15 * 0.85 / 1e5) = [0.1466, 0.1534]
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let contamination = ContaminationSpec::new(0.15, 8.0).unwrap();
        let traj = simulate(
            &model,
            &noise,
            Some(&contamination),
            &DVector::zeros(3),
            100_000,
            11,
        )
        .unwrap();
        let frac = traj.outlier_flags.iter().filter(|&&f| f).count() as f64 / 1e5;
        assert!((0.1466..=0.1534).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn flags_mark_exactly_the_perturbed_steps() {
        // Same seed with omega -> tiny gives the same flag pattern; the
        // measurements differ exactly where the flags are set.
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let big = ContaminationSpec::new(0.2, 8.0).unwrap();
        let tiny = ContaminationSpec::new(0.2, 1e-9).unwrap();
        let x0 = DVector::zeros(3);
        let a = simulate(&model, &noise, Some(&big), &x0, 300, 99).unwrap();
        let b = simulate(&model, &noise, Some(&tiny), &x0, 300, 99).unwrap();
        assert_eq!(a.outlier_flags, b.outlier_flags);
        assert!(a.outlier_flags.iter().any(|&f| f));
        for k in 0..300 {
            let diff = (&a.measurements[k] - &b.measurements[k]).norm();
            if a.outlier_flags[k] {
                assert!(diff > 1e-6, "flagged step {k} unchanged");
            } else {
                assert!(diff == 0.0, "clean step {k} changed by {diff}");
            }
        }
    }

    #[test]
    fn unflagged_measurement_noise_matches_r() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let contamination = ContaminationSpec::new(0.15, 8.0).unwrap();
        let traj = simulate(
            &model,
            &noise,
            Some(&contamination),
            &DVector::zeros(3),
            100_000,
            5,
        )
        .unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..traj.len() {
            if !traj.outlier_flags[k] {
                let v = &traj.measurements[k] - model.h() * &traj.states[k];
                sum += v[0] * v[0];
                count += 1;
            }
        }
        let sample_r = sum / count as f64;
        assert!(
            (sample_r - 3.0).abs() / 3.0 < 0.05,
            "sample R = {sample_r}"
        );
    }

    #[test]
    fn non_psd_noise_is_rejected() {
        let model = third_order();
        let noise = NoiseCovariances::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        let res = simulate(&model, &noise, None, &DVector::zeros(3), 10, 1);
        assert!(res.is_err());
    }

    #[test]
    fn contamination_spec_bounds() {
        assert!(ContaminationSpec::new(1.0, 8.0).is_err());
        assert!(ContaminationSpec::new(-0.1, 8.0).is_err());
        assert!(ContaminationSpec::new(0.1, 0.0).is_err());
        assert!(ContaminationSpec::new(0.0, 8.0).is_ok());
    }
}
