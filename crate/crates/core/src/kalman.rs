//! Kalman filtering: steady-state gain via Riccati fixed-point iteration,
//! fixed-gain prediction, the full time-varying filter, and the discrete
//! Lyapunov solver for the residual covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::ssm::{NoiseCovariances, StateSpaceModel};

/// Maximum fixed-point iterations for the Riccati recursion.
const RICCATI_MAX_ITERATIONS: usize = 10_000;
/// Relative Frobenius tolerance for Riccati convergence.
const RICCATI_TOLERANCE: f64 = 1e-10;
/// Innovation covariances with condition number above this are treated as
/// singular.
const MAX_CONDITION: f64 = 1e14;

/// Steady-state Kalman gain and prediction-error covariance.
#[derive(Debug, Clone)]
pub struct SteadyStateGain {
    /// Gain `K` (`n_x x n_z`).
    pub k: DMatrix<f64>,
    /// Prediction-error covariance `P` (`n_x x n_x`), the Riccati fixed point.
    pub p_pred: DMatrix<f64>,
    /// Fixed-point iterations performed.
    pub iterations: usize,
    /// Whether the iteration met the tolerance within the budget.
    pub converged: bool,
}

/// Output of a filtering pass over a measurement sequence.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Innovations `e_k = z_k - H xhat_{k|k-1}`.
    pub innovations: Vec<DVector<f64>>,
    /// One-step predictions `xhat_{k|k-1}`.
    pub predicted_states: Vec<DVector<f64>>,
    /// Filtered estimates `xhat_{k|k}`.
    pub filtered_states: Vec<DVector<f64>>,
    /// Prediction for the step after the last measurement, for carrying the
    /// filter across batches.
    pub final_predicted_state: DVector<f64>,
    /// Final prediction covariance (time-varying filter only).
    pub final_predicted_cov: Option<DMatrix<f64>>,
}

/// Floor `R` for invertibility: intermediate estimates projected onto the PSD
/// cone can be singular, which the gain computation cannot tolerate.
fn floor_r(r: &DMatrix<f64>) -> DMatrix<f64> {
    if linalg::min_eigenvalue(r) < 1e-10 {
        let bump = 1e-8 * r.trace().max(1.0);
        r + DMatrix::identity(r.nrows(), r.ncols()).scale(bump)
    } else {
        r.clone()
    }
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if linalg::condition_number(m) > MAX_CONDITION {
        return Err(Error::Numerical(format!(
            "{what} is numerically singular (condition > {MAX_CONDITION:.0e})"
        )));
    }
    linalg::symmetrize(m)
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Solve the prediction-form Riccati equation by fixed-point iteration
/// starting from `P = Gw Q Gw^T`:
///
/// `P <- F P F^T - F P H^T (H P H^T + R)^{-1} H P F^T + Gw Q Gw^T`
///
/// Non-convergence within the budget returns `converged = false` with the
/// last iterate; a singular innovation covariance is a hard error.
pub fn steady_state_gain(
    model: &StateSpaceModel,
    noise: &NoiseCovariances,
) -> Result<SteadyStateGain> {
    if noise.q.nrows() != model.n_w() || noise.r.nrows() != model.n_z() {
        return Err(Error::Validation(format!(
            "noise dimensions ({}, {}) do not match model ({}, {})",
            noise.q.nrows(),
            noise.r.nrows(),
            model.n_w(),
            model.n_z()
        )));
    }
    if !noise.is_psd() {
        return Err(Error::Numerical(
            "steady-state gain requires PSD (Q, R)".into(),
        ));
    }
    let f = model.f();
    let h = model.h();
    let r = floor_r(&noise.r);
    let gqg = model.gw() * &noise.q * model.gw().transpose();

    let mut p = gqg.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < RICCATI_MAX_ITERATIONS {
        iterations += 1;
        let s = h * &p * h.transpose() + &r;
        // K^T = S^{-1} H P  =>  K = (S^{-1} H P)^T
        let kt = solve_spd(&s, &(h * &p), "innovation covariance")?;
        let k = kt.transpose();
        let p_next = linalg::symmetrize(&(f * (&p - &k * h * &p) * f.transpose() + &gqg));
        let delta = (&p_next - &p).norm();
        p = p_next;
        if delta < RICCATI_TOLERANCE * (1.0 + p.norm()) {
            converged = true;
            break;
        }
    }
    let s = h * &p * h.transpose() + &r;
    let kt = solve_spd(&s, &(h * &p), "innovation covariance")?;
    Ok(SteadyStateGain {
        k: kt.transpose(),
        p_pred: p,
        iterations,
        converged,
    })
}

/// Closed-loop prediction matrix `Fbar = F - F K H`.
pub fn closed_loop(model: &StateSpaceModel, k: &DMatrix<f64>) -> DMatrix<f64> {
    model.f() - model.f() * k * model.h()
}

/// Run the fixed-gain linear predictor `xhat_{k+1|k} = F (xhat_{k|k-1} + K e_k)`
/// over a measurement sequence, starting from the prediction `x0_pred`.
pub fn run_predictor(
    model: &StateSpaceModel,
    k: &DMatrix<f64>,
    measurements: &[DVector<f64>],
    x0_pred: &DVector<f64>,
) -> Result<FilterRun> {
    if k.nrows() != model.n_x() || k.ncols() != model.n_z() {
        return Err(Error::Validation(format!(
            "gain must be {}x{}, got {}x{}",
            model.n_x(),
            model.n_z(),
            k.nrows(),
            k.ncols()
        )));
    }
    if x0_pred.len() != model.n_x() {
        return Err(Error::Validation("x0_pred has wrong length".into()));
    }
    let mut predicted = x0_pred.clone();
    let mut innovations = Vec::with_capacity(measurements.len());
    let mut predicted_states = Vec::with_capacity(measurements.len());
    let mut filtered_states = Vec::with_capacity(measurements.len());
    for (t, z) in measurements.iter().enumerate() {
        if z.len() != model.n_z() {
            return Err(Error::Validation(format!(
                "measurement {t} has length {}, expected {}",
                z.len(),
                model.n_z()
            )));
        }
        let e = z - model.h() * &predicted;
        let filtered = &predicted + k * &e;
        predicted_states.push(predicted.clone());
        innovations.push(e);
        predicted = model.f() * &filtered;
        filtered_states.push(filtered);
    }
    Ok(FilterRun {
        innovations,
        predicted_states,
        filtered_states,
        final_predicted_state: predicted,
        final_predicted_cov: None,
    })
}

/// Run the full time-varying Kalman filter from the prior `(x0, P0)` on
/// `xhat_{0|0}`, with Joseph-form covariance updates.
pub fn run_kf(
    model: &StateSpaceModel,
    noise: &NoiseCovariances,
    measurements: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<FilterRun> {
    if x0.len() != model.n_x() || p0.nrows() != model.n_x() || p0.ncols() != model.n_x() {
        return Err(Error::Validation(
            "x0/P0 dimensions do not match the model".into(),
        ));
    }
    if !noise.is_psd() {
        return Err(Error::Numerical("run_kf requires PSD (Q, R)".into()));
    }
    let f = model.f();
    let h = model.h();
    let gqg = model.gw() * &noise.q * model.gw().transpose();
    let identity = DMatrix::<f64>::identity(model.n_x(), model.n_x());

    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut innovations = Vec::with_capacity(measurements.len());
    let mut predicted_states = Vec::with_capacity(measurements.len());
    let mut filtered_states = Vec::with_capacity(measurements.len());
    for z in measurements {
        let x_pred = f * &x;
        let p_pred = linalg::symmetrize(&(f * &p * f.transpose() + &gqg));
        let e = z - h * &x_pred;
        let s = h * &p_pred * h.transpose() + &noise.r;
        let kt = solve_spd(&s, &(h * &p_pred), "innovation covariance")?;
        let k = kt.transpose();
        x = &x_pred + &k * &e;
        let i_kh = &identity - &k * h;
        p = linalg::symmetrize(&(&i_kh * &p_pred * i_kh.transpose() + &k * &noise.r * k.transpose()));
        predicted_states.push(x_pred);
        innovations.push(e);
        filtered_states.push(x.clone());
    }
    // one more prediction so the run can be continued seamlessly
    let final_predicted_state = f * &x;
    let final_predicted_cov = linalg::symmetrize(&(f * &p * f.transpose() + &gqg));
    Ok(FilterRun {
        innovations,
        predicted_states,
        filtered_states,
        final_predicted_state,
        final_predicted_cov: Some(final_predicted_cov),
    })
}

/// Solve the discrete Lyapunov equation
/// `P = Fbar P Fbar^T + G Sigma G^T`
/// by the vectorized direct solve `vec(P) = (I - Fbar (x) Fbar)^{-1} vec(G Sigma G^T)`.
///
/// Requires `rho(Fbar) < 1`, otherwise no unique solution exists.
pub fn solve_residual_lyapunov(
    fbar: &DMatrix<f64>,
    g: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = fbar.nrows();
    if fbar.ncols() != n {
        return Err(Error::Validation("Fbar must be square".into()));
    }
    if g.nrows() != n || sigma.nrows() != g.ncols() || sigma.ncols() != g.ncols() {
        return Err(Error::Validation(
            "G/Sigma dimensions do not match Fbar".into(),
        ));
    }
    let rho = linalg::spectral_radius(fbar);
    if rho >= 1.0 {
        return Err(Error::Numerical(format!(
            "Lyapunov equation has no unique solution: rho(Fbar) = {rho:.6}"
        )));
    }
    let w = g * sigma * g.transpose();
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - fbar.kronecker(fbar);
    let rhs = linalg::vec_stack(&w);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov system is singular".into()))?;
    Ok(linalg::symmetrize(&linalg::unvec(&sol, n, n)?))
}

/// `Sigma = blockdiag(Q, R)` and `G = [Gw, -F K]`, the residual-dynamics
/// noise input pair: the prediction residual evolves as
/// `eps_{k+1} = Fbar eps_k + Gw w_k - F K v_k`.
pub fn residual_noise_input(
    model: &StateSpaceModel,
    k: &DMatrix<f64>,
    noise: &NoiseCovariances,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_x = model.n_x();
    let n_w = model.n_w();
    let n_z = model.n_z();
    let mut g = DMatrix::zeros(n_x, n_w + n_z);
    g.view_mut((0, 0), (n_x, n_w)).copy_from(model.gw());
    g.view_mut((0, n_w), (n_x, n_z))
        .copy_from(&(-(model.f() * k)));
    let mut sigma = DMatrix::zeros(n_w + n_z, n_w + n_z);
    sigma.view_mut((0, 0), (n_w, n_w)).copy_from(&noise.q);
    sigma.view_mut((n_w, n_w), (n_z, n_z)).copy_from(&noise.r);
    (g, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{simulate, ContaminationSpec};
    use approx::assert_relative_eq;

    fn scalar_model(f: f64, gw: f64, h: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, gw),
            DMatrix::from_element(1, 1, h),
        )
        .unwrap()
    }

    fn third_order() -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0, 0.3]),
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn scalar_one_step_riccati() {
        // F = 0: P = Q = 1, K = P/(P + R) = 0.5
        let gain = steady_state_gain(&scalar_model(0.0, 1.0, 1.0), &NoiseCovariances::scalar(1.0, 1.0))
            .unwrap();
        assert!(gain.converged);
        assert_relative_eq!(gain.p_pred[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(gain.k[(0, 0)], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn scalar_zero_process_noise() {
        let gain = steady_state_gain(&scalar_model(0.5, 1.0, 1.0), &NoiseCovariances::scalar(0.0, 1.0))
            .unwrap();
        assert!(gain.converged);
        assert!(gain.p_pred[(0, 0)].abs() < 1e-9);
        assert!(gain.k[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn gain_satisfies_defining_identity() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let gain = steady_state_gain(&model, &noise).unwrap();
        assert!(gain.converged);
        // K = P H^T (H P H^T + R)^{-1}
        let s = model.h() * &gain.p_pred * model.h().transpose() + &noise.r;
        let expect = &gain.p_pred * model.h().transpose() * s.clone().try_inverse().unwrap();
        assert_relative_eq!(gain.k, expect, epsilon = 1e-10);
        // innovation variance for the benchmark system
        assert_relative_eq!(s[(0, 0)], 4.3, epsilon = 0.05);
        // closed loop is stable
        assert!(linalg::spectral_radius(&closed_loop(&model, &gain.k)) < 1.0);
    }

    #[test]
    fn riccati_fixed_point_matches_lyapunov() {
        // At the steady-state gain, P solves the residual Lyapunov equation
        // with G = [Gw, -FK], Sigma = blockdiag(Q, R).
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let gain = steady_state_gain(&model, &noise).unwrap();
        let fbar = closed_loop(&model, &gain.k);
        let (g, sigma) = residual_noise_input(&model, &gain.k, &noise);
        let p_eps = solve_residual_lyapunov(&fbar, &g, &sigma).unwrap();
        assert!(
            (&p_eps - &gain.p_pred).norm() / gain.p_pred.norm() < 1e-8,
            "Riccati and Lyapunov solutions disagree"
        );
    }

    #[test]
    fn lyapunov_nilpotent_and_scalar() {
        // Fbar = 0 => P = G Sigma G^T
        let p = solve_residual_lyapunov(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
        )
        .unwrap();
        assert_relative_eq!(p, DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]), epsilon = 1e-12);

        // scalar geometric series: P = 3 / (1 - 0.25) = 4
        let p = solve_residual_lyapunov(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_matches_truncated_series_oracle() {
        // brute-force oracle: P = sum_{j=0}^{200} Fbar^j W (Fbar^T)^j
        let fbar = DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, -0.2, 0.3, 0.1, 0.0, 0.2, -0.5]);
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, -1.0, 2.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let solved = solve_residual_lyapunov(&fbar, &g, &sigma).unwrap();

        let w = &g * &sigma * g.transpose();
        let mut oracle = DMatrix::zeros(3, 3);
        let mut term = w.clone();
        let mut fpow = DMatrix::<f64>::identity(3, 3);
        for _ in 0..=200 {
            oracle += &term;
            fpow *= &fbar;
            term = &fpow * &w * fpow.transpose();
        }
        assert!((solved - &oracle).norm() / oracle.norm() < 1e-10);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let res = solve_residual_lyapunov(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
        );
        assert!(res.is_err());
    }

    #[test]
    fn predictor_open_loop_and_reset() {
        // K = 0 from zero state: innovations equal the measurements
        let model = scalar_model(0.7, 1.0, 1.0);
        let zs: Vec<_> = [1.0, -2.0, 0.5]
            .iter()
            .map(|&v| DVector::from_element(1, v))
            .collect();
        let run = run_predictor(&model, &DMatrix::zeros(1, 1), &zs, &DVector::zeros(1)).unwrap();
        for (e, z) in run.innovations.iter().zip(&zs) {
            assert_relative_eq!(e, z, epsilon = 1e-14);
        }

        // F = 0 resets the prediction to zero every step
        let model = scalar_model(0.0, 1.0, 1.0);
        let zs: Vec<_> = [2.0, 2.0]
            .iter()
            .map(|&v| DVector::from_element(1, v))
            .collect();
        let run = run_predictor(
            &model,
            &DMatrix::from_element(1, 1, 0.5),
            &zs,
            &DVector::zeros(1),
        )
        .unwrap();
        assert_relative_eq!(run.innovations[0][0], 2.0);
        assert_relative_eq!(run.predicted_states[1][0], 0.0);
        assert_relative_eq!(run.innovations[1][0], 2.0);
    }

    #[test]
    fn oracle_predictor_innovation_variance() {
        // sample variance of innovations ~ (H Gw)^2 Q + R = 4.25 within 5%
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let traj = simulate(&model, &noise, None, &DVector::zeros(3), 100_000, 21).unwrap();
        let gain = steady_state_gain(&model, &noise).unwrap();
        let run = run_predictor(&model, &gain.k, &traj.measurements, &DVector::zeros(3)).unwrap();
        let var = run.innovations.iter().map(|e| e[0] * e[0]).sum::<f64>()
            / run.innovations.len() as f64;
        assert!((var - 4.25).abs() / 4.25 < 0.05, "innovation variance {var}");
    }

    #[test]
    fn predictor_state_carries_across_batches() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let traj = simulate(&model, &noise, None, &DVector::zeros(3), 400, 3).unwrap();
        let gain = steady_state_gain(&model, &noise).unwrap();
        let whole = run_predictor(&model, &gain.k, &traj.measurements, &DVector::zeros(3)).unwrap();
        let first = run_predictor(&model, &gain.k, &traj.measurements[..200], &DVector::zeros(3))
            .unwrap();
        let second = run_predictor(
            &model,
            &gain.k,
            &traj.measurements[200..],
            &first.final_predicted_state,
        )
        .unwrap();
        for (k, e) in first.innovations.iter().chain(&second.innovations).enumerate() {
            assert_relative_eq!(e, &whole.innovations[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn kf_limits() {
        let model = third_order();
        let zs: Vec<_> = (0..50)
            .map(|i| DVector::from_element(1, (i as f64 * 0.7).sin()))
            .collect();

        // huge R: filtered ~= predicted (measurements ignored)
        let noise = NoiseCovariances::scalar(5.0, 1e12);
        let run = run_kf(&model, &noise, &zs, &DVector::zeros(3), &DMatrix::identity(3, 3)).unwrap();
        for k in 0..zs.len() {
            assert!((&run.filtered_states[k] - &run.predicted_states[k]).norm() < 1e-6);
        }

        // Q = 0, P0 = 0: deterministic recursion from x0 regardless of data
        let noise = NoiseCovariances::scalar(0.0, 3.0);
        let x0 = DVector::from_row_slice(&[1.0, -1.0, 2.0]);
        let run = run_kf(&model, &noise, &zs, &x0, &DMatrix::zeros(3, 3)).unwrap();
        let mut x = x0.clone();
        for k in 0..zs.len() {
            x = model.f() * &x;
            assert_relative_eq!(run.filtered_states[k], x, epsilon = 1e-10);
        }
    }

    #[test]
    fn time_varying_gain_converges_to_steady_state() {
        // Implied gain from the final predicted covariance after 200 steps
        // matches the fixed-point solver.
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let traj = simulate(&model, &noise, None, &DVector::zeros(3), 200, 17).unwrap();
        let run = run_kf(
            &model,
            &noise,
            &traj.measurements,
            &DVector::zeros(3),
            &DMatrix::identity(3, 3).scale(10.0),
        )
        .unwrap();
        let p_pred = run.final_predicted_cov.unwrap();
        let s = model.h() * &p_pred * model.h().transpose() + &noise.r;
        let k_tv = &p_pred * model.h().transpose() * s.try_inverse().unwrap();
        let gain = steady_state_gain(&model, &noise).unwrap();
        assert!((k_tv - &gain.k).norm() < 1e-8);
    }

    #[test]
    fn predictor_matches_kf_after_burn_in() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 3.0);
        let contamination = ContaminationSpec::new(0.0, 8.0).ok();
        let traj = simulate(
            &model,
            &noise,
            contamination.as_ref(),
            &DVector::zeros(3),
            600,
            9,
        )
        .unwrap();
        let gain = steady_state_gain(&model, &noise).unwrap();
        let pred = run_predictor(&model, &gain.k, &traj.measurements, &DVector::zeros(3)).unwrap();
        let kf = run_kf(
            &model,
            &noise,
            &traj.measurements,
            &DVector::zeros(3),
            &DMatrix::identity(3, 3).scale(10.0),
        )
        .unwrap();
        for k in 200..traj.len() {
            let diff = (&pred.innovations[k] - &kf.innovations[k]).norm();
            assert!(diff < 1e-6, "innovation mismatch {diff} at step {k}");
        }
    }

    #[test]
    fn singular_r_is_floored_not_fatal() {
        let model = third_order();
        let noise = NoiseCovariances::scalar(5.0, 0.0);
        let gain = steady_state_gain(&model, &noise).unwrap();
        assert!(gain.converged);
        assert!(gain.k.iter().all(|v| v.is_finite()));
    }
}
