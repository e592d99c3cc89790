//! The batched outer loop: collect innovations with a gain refreshed from the
//! current estimate, optionally clean them, form the autocovariance
//! regression, solve it (Huber IRLS or plain OLS), project, and average the
//! last few batch estimates into the final answer.

use nalgebra::{DMatrix, DVector};

use crate::als::{
    build_design_matrix, empirical_autocov, ols_solve, project_psd, unpack_theta,
};
use crate::error::{Error, Result};
use crate::kalman::{run_predictor, steady_state_gain, SteadyStateGain};
use crate::linalg;
use crate::robust::{detect_innovation_outliers, irls_solve, HuberConfig, IrlsResult};
use crate::ssm::{validate_model, NoiseCovariances, StateSpaceModel};

/// Estimator tuning. The defaults are the benchmark settings: `N = 15` lags,
/// batches of 150 over a 1500-step warm-up, averaging the last 5 batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// Autocovariance lag window `N`.
    pub lag_window: usize,
    /// Nominal batch length `tau`; the effective length is
    /// `max(tau, 3 * N)` so the highest lag keeps enough pairs.
    pub batch_length: usize,
    /// Total warm-up steps consumed from the measurement sequence.
    pub warmup_length: usize,
    /// Batch estimates averaged into the final estimate.
    pub n_avg: usize,
    /// Initial process-noise guess.
    pub q0: DMatrix<f64>,
    /// Initial measurement-noise guess.
    pub r0: DMatrix<f64>,
    /// Innovation detection multiplier (flag when `|e| > gamma_thr * sigma`).
    pub gamma_thr: f64,
    /// IRLS tuning.
    pub huber: HuberConfig,
    /// Tier 1: exclude flagged innovations from the autocovariances.
    pub cleaning_enabled: bool,
    /// Tier 2: solve the regression by Huber IRLS instead of OLS.
    pub robust_enabled: bool,
    /// Early stop when the relative change of both estimates drops below
    /// this after at least `n_avg` batches.
    pub outer_tolerance: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lag_window: 15,
            batch_length: 150,
            warmup_length: 1500,
            n_avg: 5,
            q0: DMatrix::from_element(1, 1, 2.0),
            r0: DMatrix::from_element(1, 1, 1.0),
            gamma_thr: 3.5,
            huber: HuberConfig::default(),
            cleaning_enabled: true,
            robust_enabled: true,
            outer_tolerance: 1e-3,
        }
    }
}

impl EstimatorConfig {
    /// Effective batch length `max(tau, 3 N)`.
    pub fn tau_use(&self) -> usize {
        self.batch_length.max(3 * self.lag_window)
    }

    /// Number of batches the warm-up yields.
    pub fn n_batches(&self) -> usize {
        self.warmup_length / self.tau_use()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lag_window == 0 {
            return Err(Error::Validation("lag_window must be >= 1".into()));
        }
        if self.batch_length == 0 {
            return Err(Error::Validation("batch_length must be >= 1".into()));
        }
        if self.warmup_length < self.tau_use() {
            return Err(Error::Validation(format!(
                "warmup_length {} is shorter than one batch (tau_use = {})",
                self.warmup_length,
                self.tau_use()
            )));
        }
        if self.n_avg == 0 || self.n_avg > self.n_batches() {
            return Err(Error::Validation(format!(
                "n_avg must be in [1, {}], got {}",
                self.n_batches(),
                self.n_avg
            )));
        }
        if !(self.gamma_thr > 0.0) {
            return Err(Error::Validation("gamma_thr must be positive".into()));
        }
        if !(self.outer_tolerance >= 0.0) {
            return Err(Error::Validation("outer_tolerance must be >= 0".into()));
        }
        self.huber.validate()
    }
}

/// Everything one call to [`estimate`] produced.
#[derive(Debug, Clone)]
pub struct EstimationRun {
    /// Per-batch `(Q, R)` estimates after projection and flooring.
    pub per_batch_estimates: Vec<NoiseCovariances>,
    /// Mean of the last `n_avg` batch estimates, re-projected.
    pub final_estimate: NoiseCovariances,
    /// Innovations flagged per batch (zero when cleaning is off).
    pub per_batch_flag_counts: Vec<usize>,
    /// IRLS diagnostics per batch (`None` when the robust path is off).
    pub per_batch_irls: Vec<Option<IrlsResult>>,
    /// Gains the predictor ran with, per batch.
    pub gains_used: Vec<DMatrix<f64>>,
    /// Whether the outer loop stopped before consuming all batches.
    pub stopped_early: bool,
}

fn blend(a: &NoiseCovariances, b: &NoiseCovariances) -> NoiseCovariances {
    NoiseCovariances {
        q: 0.5 * (&a.q + &b.q),
        r: 0.5 * (&a.r + &b.r),
    }
}

fn relative_change(new: &NoiseCovariances, old: &NoiseCovariances) -> f64 {
    let dq = (&new.q - &old.q).norm() / old.q.norm().max(1e-12);
    let dr = (&new.r - &old.r).norm() / old.r.norm().max(1e-12);
    dq.max(dr)
}

/// Solve the gain for the current estimate, requiring convergence; the
/// design-matrix build then enforces closed-loop stability.
fn solve_gain(model: &StateSpaceModel, covs: &NoiseCovariances) -> Result<SteadyStateGain> {
    let gain = steady_state_gain(model, covs)?;
    if !gain.converged {
        return Err(Error::Numerical(
            "Riccati iteration did not converge for the current estimate".into(),
        ));
    }
    Ok(gain)
}

/// Run the batched estimation loop over the first `warmup_length`
/// measurements.
///
/// Per batch: solve the steady-state gain from the current `(Q, R)` estimate,
/// build the design matrix, run the fixed-gain predictor (the predicted state
/// carries across batches), optionally flag and exclude outlier innovations,
/// solve the regression, unpack, project onto the PSD cone and floor `R` for
/// the next gain solve. An estimate that destabilizes the closed loop is
/// retried once blended 50/50 toward the previous batch's estimate.
pub fn estimate(
    model: &StateSpaceModel,
    measurements: &[DVector<f64>],
    config: &EstimatorConfig,
) -> Result<EstimationRun> {
    config.validate()?;
    if !validate_model(model).stable {
        return Err(Error::Numerical(
            "model must be stable for estimation".into(),
        ));
    }
    if config.q0.nrows() != model.n_w() || config.r0.nrows() != model.n_z() {
        return Err(Error::Validation(format!(
            "initial guesses are {}x{}/{}x{}, model needs {}/{}",
            config.q0.nrows(),
            config.q0.ncols(),
            config.r0.nrows(),
            config.r0.ncols(),
            model.n_w(),
            model.n_z()
        )));
    }
    if measurements.len() < config.warmup_length {
        return Err(Error::Validation(format!(
            "need at least warmup_length = {} measurements, got {}",
            config.warmup_length,
            measurements.len()
        )));
    }

    let tau_use = config.tau_use();
    let n_batches = config.n_batches();
    let n_w = model.n_w();
    let n_z = model.n_z();

    let mut current = NoiseCovariances::new(config.q0.clone(), config.r0.clone())?;
    if !current.is_psd() {
        return Err(Error::Validation("initial (Q0, R0) must be PSD".into()));
    }
    let mut previous = current.clone();
    let mut x_pred = DVector::zeros(model.n_x());

    let mut per_batch_estimates = Vec::with_capacity(n_batches);
    let mut per_batch_flag_counts = Vec::with_capacity(n_batches);
    let mut per_batch_irls = Vec::with_capacity(n_batches);
    let mut gains_used = Vec::with_capacity(n_batches);
    let mut stopped_early = false;

    for l in 0..n_batches {
        // gain + design for the current estimate, with one blend-and-retry
        // if a wild intermediate estimate destabilizes the closed loop
        let (gain, design) = match solve_gain(model, &current)
            .and_then(|g| build_design_matrix(model, &g.k, config.lag_window).map(|d| (g, d)))
        {
            Ok(pair) => pair,
            Err(_) => {
                current = blend(&current, &previous);
                solve_gain(model, &current)
                    .and_then(|g| {
                        build_design_matrix(model, &g.k, config.lag_window).map(|d| (g, d))
                    })
                    .map_err(|e| e.in_batch(l))?
            }
        };

        let batch = &measurements[l * tau_use..(l + 1) * tau_use];
        let run = run_predictor(model, &gain.k, batch, &x_pred).map_err(|e| e.in_batch(l))?;
        x_pred = run.final_predicted_state.clone();

        let flags = if config.cleaning_enabled {
            detect_innovation_outliers(&run.innovations, config.gamma_thr)
                .map_err(|e| e.in_batch(l))?
                .flags
        } else {
            Vec::new()
        };
        let autocov = empirical_autocov(&run.innovations, config.lag_window, &flags)
            .map_err(|e| e.in_batch(l))?;

        let (theta, irls) = if config.robust_enabled {
            let result = irls_solve(&design.a, &autocov.b, &config.huber, None)
                .map_err(|e| e.in_batch(l))?;
            (result.theta.clone(), Some(result))
        } else {
            let sol = ols_solve(&design.a, &autocov.b).map_err(|e| e.in_batch(l))?;
            (sol.theta, None)
        };

        let raw = unpack_theta(&theta, n_w, n_z).map_err(|e| e.in_batch(l))?;
        let projected = project_psd(&raw);
        // floor R so the next Riccati solve sees an invertible innovation
        // covariance; Q needs nothing beyond the cone projection
        let r_floor = 1e-8 * projected.r.trace().max(1.0);
        let batch_estimate = NoiseCovariances {
            q: projected.q,
            r: linalg::clip_eigenvalues(&projected.r, r_floor),
        };

        per_batch_estimates.push(batch_estimate.clone());
        per_batch_flag_counts.push(flags.len());
        per_batch_irls.push(irls);
        gains_used.push(gain.k.clone());

        let change = relative_change(&batch_estimate, &current);
        previous = current;
        current = batch_estimate;
        if per_batch_estimates.len() >= config.n_avg && change < config.outer_tolerance {
            stopped_early = per_batch_estimates.len() < n_batches;
            break;
        }
    }

    // final estimate: average the last n_avg batch estimates, re-project
    let tail = &per_batch_estimates[per_batch_estimates.len() - config.n_avg..];
    let mut q_mean = DMatrix::zeros(n_w, n_w);
    let mut r_mean = DMatrix::zeros(n_z, n_z);
    for est in tail {
        q_mean += &est.q;
        r_mean += &est.r;
    }
    q_mean /= config.n_avg as f64;
    r_mean /= config.n_avg as f64;
    let final_estimate = project_psd(&NoiseCovariances {
        q: q_mean,
        r: r_mean,
    });

    Ok(EstimationRun {
        per_batch_estimates,
        final_estimate,
        per_batch_flag_counts,
        per_batch_irls,
        gains_used,
        stopped_early,
    })
}
