//! Comparison filters for the downstream state-estimation study: plain
//! Kalman filters fed with true or fixed covariances, a maximum-correntropy
//! measurement update, and a Student-t variational measurement update.
//!
//! The two robust variants are canonical simplified forms with all tuning
//! exposed; both collapse to the plain Kalman filter in their respective
//! limits (kernel bandwidth to infinity, degrees of freedom to infinity).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{run_kf, FilterRun};
use crate::linalg;
use crate::ssm::{NoiseCovariances, StateSpaceModel};

/// Which comparison filter to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Plain KF with the covariances in `covariances` (used with the truth
    /// it is the oracle lower bound).
    Oracle,
    /// Plain KF with fixed covariances.
    Fixed,
    /// Maximum-correntropy measurement update.
    Mckf,
    /// Student-t variational measurement update.
    StudentT,
}

/// Filter selection plus tuning.
#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Covariances the filter runs with (the truth for `Oracle`, fixed,
    /// possibly misspecified values otherwise).
    pub covariances: NoiseCovariances,
    /// Correntropy kernel bandwidth.
    pub mckf_bandwidth: f64,
    /// Cap on correntropy fixed-point passes per step.
    pub mckf_max_fixed_point: usize,
    /// Student-t degrees of freedom.
    pub student_dof: f64,
    /// Variational passes per step.
    pub student_vb_iterations: usize,
}

impl BaselineConfig {
    /// Standard tuning around a covariance pair.
    pub fn new(method: BaselineMethod, covariances: NoiseCovariances) -> Self {
        Self {
            method,
            covariances,
            mckf_bandwidth: 5.0,
            mckf_max_fixed_point: 10,
            student_dof: 3.0,
            student_vb_iterations: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mckf_bandwidth > 0.0) {
            return Err(Error::Validation("mckf_bandwidth must be positive".into()));
        }
        if !(self.student_dof > 2.0) {
            return Err(Error::Validation(
                "student_dof must exceed 2 (finite variance)".into(),
            ));
        }
        if self.mckf_max_fixed_point == 0 || self.student_vb_iterations == 0 {
            return Err(Error::Validation("iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inner tolerance of the correntropy fixed point.
const MCKF_TOLERANCE: f64 = 1e-6;
/// Kernel weights are floored here to keep the reweighted covariance finite.
const MCKF_MIN_WEIGHT: f64 = 1e-12;

/// One correntropy measurement update.
#[derive(Debug, Clone)]
pub struct MckfStep {
    /// Updated state estimate.
    pub x: DVector<f64>,
    /// Updated covariance (Joseph form with the reweighted `R`).
    pub p: DMatrix<f64>,
    /// Final per-channel kernel weights in `(0, 1]`.
    pub kernel_weights: DVector<f64>,
    /// Fixed-point passes performed.
    pub iterations: usize,
    /// Correntropy-induced cost after each pass (Welsch loss on the
    /// standardized residual plus the prior quadratic); nonincreasing.
    pub objective_trace: Vec<f64>,
}

/// Welsch loss plus prior term: the cost whose half-quadratic minimization is
/// the correntropy fixed point.
fn mckf_objective(
    x: &DVector<f64>,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
    r_chol: &DMatrix<f64>,
    x_pred: &DVector<f64>,
    p_pred_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    sigma: f64,
) -> f64 {
    let resid = r_chol
        .solve_lower_triangular(&(z - h * x))
        .expect("R factor is nonsingular");
    let s2 = sigma * sigma;
    let loss: f64 = resid
        .iter()
        .map(|&e| s2 * (1.0 - (-e * e / (2.0 * s2)).exp()))
        .sum();
    let d = x - x_pred;
    let prior = 0.5 * d.dot(&p_pred_chol.solve(&d));
    loss + prior
}

/// Correntropy measurement update: reweight `R` by the Gaussian kernel of the
/// standardized residual and iterate the resulting gain to a fixed point.
pub fn mckf_update(
    model: &StateSpaceModel,
    config: &BaselineConfig,
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<MckfStep> {
    let h = model.h();
    let identity = DMatrix::<f64>::identity(model.n_x(), model.n_x());
    let r_chol = linalg::symmetrize(&config.covariances.r)
        .cholesky()
        .ok_or_else(|| Error::Numerical("MCKF requires positive definite R".into()))?
        .l();
    let p_pred_chol = linalg::symmetrize(p_pred)
        .cholesky()
        .ok_or_else(|| Error::Numerical("MCKF requires positive definite P_pred".into()))?;
    let sigma = config.mckf_bandwidth;

    let mut x = x_pred.clone();
    let mut kernel_weights = DVector::from_element(model.n_z(), 1.0);
    let mut r_eff = config.covariances.r.clone();
    let mut gain = DMatrix::zeros(model.n_x(), model.n_z());
    let mut objective_trace =
        vec![mckf_objective(&x, z, h, &r_chol, x_pred, &p_pred_chol, sigma)];
    let mut iterations = 0;
    while iterations < config.mckf_max_fixed_point {
        iterations += 1;
        let resid = r_chol
            .solve_lower_triangular(&(z - h * &x))
            .ok_or_else(|| Error::Numerical("R factor became singular".into()))?;
        for (i, &e) in resid.iter().enumerate() {
            kernel_weights[i] = (-e * e / (2.0 * sigma * sigma)).exp().max(MCKF_MIN_WEIGHT);
        }
        let inv_w = DMatrix::from_diagonal(&kernel_weights.map(|w| 1.0 / w));
        r_eff = &r_chol * inv_w * r_chol.transpose();
        let s = h * p_pred * h.transpose() + &r_eff;
        let s_chol = linalg::symmetrize(&s)
            .cholesky()
            .ok_or_else(|| Error::Numerical("MCKF innovation covariance singular".into()))?;
        gain = s_chol.solve(&(h * p_pred)).transpose();
        let x_next = x_pred + &gain * (z - h * x_pred);
        let moved = (&x_next - &x).norm();
        x = x_next;
        objective_trace.push(mckf_objective(&x, z, h, &r_chol, x_pred, &p_pred_chol, sigma));
        if moved <= MCKF_TOLERANCE * (1.0 + x.norm()) {
            break;
        }
    }
    let i_kh = &identity - &gain * h;
    let p =
        linalg::symmetrize(&(&i_kh * p_pred * i_kh.transpose() + &gain * r_eff * gain.transpose()));
    Ok(MckfStep {
        x,
        p,
        kernel_weights,
        iterations,
        objective_trace,
    })
}

fn run_mckf(
    model: &StateSpaceModel,
    config: &BaselineConfig,
    measurements: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<FilterRun> {
    let f = model.f();
    let h = model.h();
    let gqg = model.gw() * &config.covariances.q * model.gw().transpose();
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut innovations = Vec::with_capacity(measurements.len());
    let mut predicted_states = Vec::with_capacity(measurements.len());
    let mut filtered_states = Vec::with_capacity(measurements.len());
    for z in measurements {
        let x_pred = f * &x;
        let p_pred = linalg::symmetrize(&(f * &p * f.transpose() + &gqg));
        let step = mckf_update(model, config, &x_pred, &p_pred, z)?;
        innovations.push(z - h * &x_pred);
        predicted_states.push(x_pred);
        x = step.x;
        p = step.p;
        filtered_states.push(x.clone());
    }
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

fn run_student_t(
    model: &StateSpaceModel,
    config: &BaselineConfig,
    measurements: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<FilterRun> {
    let f = model.f();
    let h = model.h();
    let nu = config.student_dof;
    let n_z = model.n_z() as f64;
    let gqg = model.gw() * &config.covariances.q * model.gw().transpose();
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
        // scalar precision weight: large normalized innovations shrink
        // lambda, inflating the effective R
        let mut lambda = 1.0f64;
        for _ in 0..config.student_vb_iterations {
            let s = h * &p_pred * h.transpose() + &config.covariances.r / lambda;
            let s_chol = linalg::symmetrize(&s).cholesky().ok_or_else(|| {
                Error::Numerical("Student-t innovation covariance singular".into())
            })?;
            let quad = e.dot(&s_chol.solve(&e));
            lambda = (nu + n_z) / (nu + quad);
        }
        let r_eff = &config.covariances.r / lambda;
        let s = h * &p_pred * h.transpose() + &r_eff;
        let s_chol = linalg::symmetrize(&s)
            .cholesky()
            .ok_or_else(|| Error::Numerical("Student-t innovation covariance singular".into()))?;
        let gain = s_chol.solve(&(h * &p_pred)).transpose();
        x = &x_pred + &gain * &e;
        let i_kh = &identity - &gain * h;
        p = linalg::symmetrize(
            &(&i_kh * &p_pred * i_kh.transpose() + &gain * &r_eff * gain.transpose()),
        );
        innovations.push(e);
        predicted_states.push(x_pred);
        filtered_states.push(x.clone());
    }
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

/// Run the selected baseline filter over a measurement sequence.
pub fn run_baseline(
    model: &StateSpaceModel,
    config: &BaselineConfig,
    measurements: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<FilterRun> {
    config.validate()?;
    match config.method {
        BaselineMethod::Oracle | BaselineMethod::Fixed => {
            run_kf(model, &config.covariances, measurements, x0, p0)
        }
        BaselineMethod::Mckf => run_mckf(model, config, measurements, x0, p0),
        BaselineMethod::StudentT => run_student_t(model, config, measurements, x0, p0),
    }
}
