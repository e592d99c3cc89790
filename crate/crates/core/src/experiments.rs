//! Two-phase Monte Carlo study: covariance identification on a contaminated
//! warm-up phase, then state estimation on a clean evaluation phase with the
//! identified covariances held fixed, aggregated over independent trials.
//!
//! Trials are embarrassingly parallel; records are collected in trial order
//! and aggregated serially with compensated summation, so the summary is
//! bit-identical regardless of worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::{run_baseline, BaselineConfig, BaselineMethod};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorConfig};
use crate::kalman::run_kf;
use crate::ssm::{simulate, ContaminationSpec, NoiseCovariances, StateSpaceModel};

/// Evaluation-phase filters start from `x = 0`, `P0 = 10 I`; the prior washes
/// out over the 500-step evaluation.
const EVAL_PRIOR_SCALE: f64 = 10.0;

/// The methods compared in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodTag {
    /// KF with the true covariances: the lower bound.
    Oracle,
    /// KF with covariances identified by the robust estimator.
    AlsIrls,
    /// KF with covariances identified by the plain estimator.
    Als,
    /// Student-t KF with fixed misspecified covariances.
    StudentT,
    /// Maximum-correntropy KF with fixed misspecified covariances.
    Mckf,
}

impl MethodTag {
    pub fn label(&self) -> &'static str {
        match self {
            MethodTag::Oracle => "oracle",
            MethodTag::AlsIrls => "als_irls",
            MethodTag::Als => "als",
            MethodTag::StudentT => "student_t",
            MethodTag::Mckf => "mckf",
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "oracle" => Some(MethodTag::Oracle),
            "als_irls" => Some(MethodTag::AlsIrls),
            "als" => Some(MethodTag::Als),
            "student_t" => Some(MethodTag::StudentT),
            "mckf" => Some(MethodTag::Mckf),
            _ => None,
        }
    }

    pub fn all() -> Vec<MethodTag> {
        vec![
            MethodTag::Oracle,
            MethodTag::AlsIrls,
            MethodTag::Als,
            MethodTag::StudentT,
            MethodTag::Mckf,
        ]
    }
}

/// Full study configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: StateSpaceModel,
    /// Ground-truth covariances driving the simulator.
    pub truth: NoiseCovariances,
    pub n_trials: usize,
    /// Trial `i` derives its seeds from `base_seed + i`.
    pub base_seed: u64,
    pub estimator: EstimatorConfig,
    pub contamination: ContaminationSpec,
    /// Outlier-free evaluation steps per trial.
    pub eval_length: usize,
    /// Methods to evaluate in the state-estimation phase.
    pub methods: Vec<MethodTag>,
    /// Fixed covariances for the Student-t and correntropy baselines.
    pub fixed_covariances: NoiseCovariances,
    pub mckf_bandwidth: f64,
    pub mckf_max_fixed_point: usize,
    pub student_dof: f64,
    pub student_vb_iterations: usize,
}

impl ExperimentConfig {
    /// The benchmark study: third-order system, `Q = 5`, `R = 3`, 15%
    /// contamination at magnitude multiplier 8, estimator defaults.
    pub fn benchmark(base_seed: u64) -> Self {
        let model = StateSpaceModel::new(
            DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 0.0, 0.3]),
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.0]),
        )
        .expect("benchmark model is well formed");
        Self {
            model,
            truth: NoiseCovariances::scalar(5.0, 3.0),
            n_trials: 100,
            base_seed,
            estimator: EstimatorConfig::default(),
            contamination: ContaminationSpec { epsilon: 0.15, omega: 8.0 },
            eval_length: 500,
            methods: MethodTag::all(),
            fixed_covariances: NoiseCovariances::scalar(0.3, 0.1),
            mckf_bandwidth: 5.0,
            mckf_max_fixed_point: 10,
            student_dof: 3.0,
            student_vb_iterations: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Validation("n_trials must be >= 1".into()));
        }
        if self.eval_length == 0 {
            return Err(Error::Validation("eval_length must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("at least one method is required".into()));
        }
        self.estimator.validate()?;
        self.baseline_config(BaselineMethod::Mckf).validate()
    }

    fn baseline_config(&self, method: BaselineMethod) -> BaselineConfig {
        let covariances = match method {
            BaselineMethod::Oracle => self.truth.clone(),
            _ => self.fixed_covariances.clone(),
        };
        BaselineConfig {
            method,
            covariances,
            mckf_bandwidth: self.mckf_bandwidth,
            mckf_max_fixed_point: self.mckf_max_fixed_point,
            student_dof: self.student_dof,
            student_vb_iterations: self.student_vb_iterations,
        }
    }
}

/// One method's outcome within one trial.
#[derive(Debug, Clone)]
pub struct TrialMethodRecord {
    pub method: MethodTag,
    /// Covariances the evaluation filter ran with.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Sum over evaluation steps of the squared state-error norm.
    pub state_sse: f64,
}

/// One successful trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub rows: Vec<TrialMethodRecord>,
}

/// Aggregated statistics for one method.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: MethodTag,
    /// `sqrt(mean_n |Q_true - Q_n|_F^2)`.
    pub rmse_q: f64,
    pub rmse_r: f64,
    /// Mean over trials of `trace(Q_n) / n_w` (the plain mean for scalars).
    pub mean_q: f64,
    pub mean_r: f64,
    /// `sqrt(sum_n sse_n / (n_trials * eval_length))`.
    pub rmse_state: f64,
}

/// Aggregated Monte Carlo outcome.
#[derive(Debug, Clone)]
pub struct McSummary {
    pub methods: Vec<MethodSummary>,
    /// Successful trials, in trial order.
    pub records: Vec<TrialRecord>,
    /// Failed trials with their errors (at most 5% of the run).
    pub failures: Vec<(usize, String)>,
    pub eval_length: usize,
}

/// Compensated (Kahan) accumulator: the aggregation total is independent of
/// how the work was scheduled because records are summed serially in trial
/// order, and compensation keeps the digits stable against reordering of the
/// surrounding code.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    fn add(&mut self, value: f64) {
        let y = value - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum
    }
}

/// splitmix64 mixer for deriving independent per-phase seeds from a trial
/// seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn phase_seeds(base_seed: u64, trial_index: usize) -> (u64, u64) {
    let mut state = base_seed.wrapping_add(trial_index as u64);
    (splitmix64(&mut state), splitmix64(&mut state))
}

/// Run one trial: contaminated warm-up, covariance identification by both
/// estimator variants, clean continuation, and evaluation filtering for each
/// configured method.
pub fn run_trial(config: &ExperimentConfig, trial_index: usize) -> Result<TrialRecord> {
    let (warmup_seed, eval_seed) = phase_seeds(config.base_seed, trial_index);
    let x0 = DVector::zeros(config.model.n_x());

    let warmup = simulate(
        &config.model,
        &config.truth,
        Some(&config.contamination),
        &x0,
        config.estimator.warmup_length,
        warmup_seed,
    )?;
    // the evaluation phase continues the state trajectory, outlier-free
    let eval = simulate(
        &config.model,
        &config.truth,
        None,
        warmup.final_state(),
        config.eval_length,
        eval_seed,
    )?;

    let robust_config = EstimatorConfig {
        robust_enabled: true,
        cleaning_enabled: true,
        ..config.estimator.clone()
    };
    let plain_config = EstimatorConfig {
        robust_enabled: false,
        cleaning_enabled: false,
        ..config.estimator.clone()
    };
    let robust_run = estimate(&config.model, &warmup.measurements, &robust_config)?;
    let plain_run = estimate(&config.model, &warmup.measurements, &plain_config)?;

    let p0 = DMatrix::identity(config.model.n_x(), config.model.n_x()).scale(EVAL_PRIOR_SCALE);
    let mut rows = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let (covs, filtered) = match method {
            MethodTag::Oracle => {
                let run = run_kf(&config.model, &config.truth, &eval.measurements, &x0, &p0)?;
                (config.truth.clone(), run.filtered_states)
            }
            MethodTag::AlsIrls => {
                let covs = robust_run.final_estimate.clone();
                let run = run_kf(&config.model, &covs, &eval.measurements, &x0, &p0)?;
                (covs, run.filtered_states)
            }
            MethodTag::Als => {
                let covs = plain_run.final_estimate.clone();
                let run = run_kf(&config.model, &covs, &eval.measurements, &x0, &p0)?;
                (covs, run.filtered_states)
            }
            MethodTag::StudentT => {
                let bl = config.baseline_config(BaselineMethod::StudentT);
                let run = run_baseline(&config.model, &bl, &eval.measurements, &x0, &p0)?;
                (bl.covariances, run.filtered_states)
            }
            MethodTag::Mckf => {
                let bl = config.baseline_config(BaselineMethod::Mckf);
                let run = run_baseline(&config.model, &bl, &eval.measurements, &x0, &p0)?;
                (bl.covariances, run.filtered_states)
            }
        };
        let state_sse: f64 = eval
            .states
            .iter()
            .zip(&filtered)
            .map(|(x, xf)| (x - xf).norm_squared())
            .sum();
        rows.push(TrialMethodRecord {
            method,
            q: covs.q,
            r: covs.r,
            state_sse,
        });
    }
    Ok(TrialRecord { trial_index, rows })
}

pub(crate) fn aggregate(
    config: &ExperimentConfig,
    records: &[TrialRecord],
) -> Vec<MethodSummary> {
    let n = records.len().max(1) as f64;
    let mut out = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let mut sq_err_q = KahanSum::default();
        let mut sq_err_r = KahanSum::default();
        let mut mean_q = KahanSum::default();
        let mut mean_r = KahanSum::default();
        let mut sse = KahanSum::default();
        for record in records {
            let row = record
                .rows
                .iter()
                .find(|r| r.method == method)
                .expect("every record covers every configured method");
            sq_err_q.add((&config.truth.q - &row.q).norm_squared());
            sq_err_r.add((&config.truth.r - &row.r).norm_squared());
            mean_q.add(row.q.trace() / row.q.nrows() as f64);
            mean_r.add(row.r.trace() / row.r.nrows() as f64);
            sse.add(row.state_sse);
        }
        out.push(MethodSummary {
            method,
            rmse_q: (sq_err_q.total() / n).sqrt(),
            rmse_r: (sq_err_r.total() / n).sqrt(),
            mean_q: mean_q.total() / n,
            mean_r: mean_r.total() / n,
            rmse_state: (sse.total() / (n * config.eval_length as f64)).sqrt(),
        });
    }
    out
}

/// Run all trials (in parallel when a rayon pool is available) and aggregate.
///
/// Individual trial failures are recorded and excluded; more than 5% failures
/// fails the whole run.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<McSummary> {
    config.validate()?;
    let results: Vec<(usize, Result<TrialRecord>)> = (0..config.n_trials)
        .into_par_iter()
        .map(|i| (i, run_trial(config, i)))
        .collect();

    let mut records = Vec::with_capacity(config.n_trials);
    let mut failures = Vec::new();
    for (i, result) in results {
        match result {
            Ok(record) => records.push(record),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if failures.len() as f64 > 0.05 * config.n_trials as f64 {
        return Err(Error::Numerical(format!(
            "{} of {} trials failed (first: trial {}: {})",
            failures.len(),
            config.n_trials,
            failures[0].0,
            failures[0].1
        )));
    }
    let methods = aggregate(config, &records);
    Ok(McSummary {
        methods,
        records,
        failures,
        eval_length: config.eval_length,
    })
}

/// One sweep position: the swept value and its Monte Carlo summary.
#[derive(Debug, Clone)]
pub struct SweepPoint<T> {
    pub value: T,
    pub summary: McSummary,
}

/// Rerun the study per contamination rate. Seeds are shared across points so
/// the curves vary smoothly in the swept parameter.
pub fn sweep_epsilon(
    config: &ExperimentConfig,
    eps_values: &[f64],
) -> Result<Vec<SweepPoint<f64>>> {
    let mut out = Vec::with_capacity(eps_values.len());
    for &epsilon in eps_values {
        let mut point_config = config.clone();
        point_config.contamination = ContaminationSpec::new(epsilon, config.contamination.omega)?;
        out.push(SweepPoint {
            value: epsilon,
            summary: run_monte_carlo(&point_config)?,
        });
    }
    Ok(out)
}

/// Rerun the study per lag window `N`; the effective batch length follows
/// `max(tau, 3 N)` automatically.
pub fn sweep_lag_window(
    config: &ExperimentConfig,
    n_values: &[usize],
) -> Result<Vec<SweepPoint<usize>>> {
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut point_config = config.clone();
        point_config.estimator.lag_window = n;
        out.push(SweepPoint {
            value: n,
            summary: run_monte_carlo(&point_config)?,
        });
    }
    Ok(out)
}
