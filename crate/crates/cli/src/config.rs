//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected.
//! Matrices are written row-major with `,` between entries and `;` between
//! rows (`f = 0.1, 0, 0.1; 0, 0.2, 0; 0, 0, 0.3`); a bare number is a 1x1
//! matrix. `--set key=value` overrides use exactly the same syntax. The
//! effective configuration is echoed back with 17-significant-digit floats,
//! so re-running from an echoed file reproduces the run bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use als_irls::experiments::{ExperimentConfig, MethodTag};
use als_irls::ssm::{ContaminationSpec, StateSpaceModel};
use nalgebra::DMatrix;

use crate::output::fmt_f64;

/// Everything a run needs: the experiment proper plus CLI-level extras.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    /// Contamination rates for `sweep-eps`.
    pub eps_sweep: Vec<f64>,
    /// Lag windows for `sweep-n`.
    pub n_sweep: Vec<usize>,
    /// Trajectory length for `simulate` (defaults to the warm-up length).
    pub sim_length: Option<usize>,
    /// Random systems for `oracle-check`.
    pub oracle_systems: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::benchmark(42),
            eps_sweep: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            n_sweep: vec![10, 15, 20, 25, 30, 40],
            sim_length: None,
            oracle_systems: 200,
        }
    }
}

impl RunConfig {
    pub fn effective_sim_length(&self) -> usize {
        self.sim_length
            .unwrap_or(self.experiment.estimator.warmup_length)
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("key '{key}': expected a number, got '{value}'"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, String> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| format!("key '{key}': expected a non-negative integer, got '{value}'"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64, String> {
    value
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("key '{key}': expected an unsigned integer, got '{value}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("key '{key}': expected true/false, got '{other}'")),
    }
}

fn parse_matrix(key: &str, value: &str) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = value
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|entry| {
                    entry
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| format!("key '{key}': bad matrix entry '{}'", entry.trim()))
                })
                .collect::<Result<Vec<f64>, String>>()
        })
        .collect::<Result<_, _>>()?;
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("key '{key}': matrix rows have inconsistent lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| fmt_f64(m[(i, j)]))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| parse_f64(key, v))
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(format!("key '{key}': empty list"))
            } else {
                Ok(v)
            }
        })
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse_usize(key, v))
        .collect()
}

fn parse_methods(key: &str, value: &str) -> Result<Vec<MethodTag>, String> {
    let methods: Vec<MethodTag> = value
        .split(',')
        .map(|v| {
            let name = v.trim();
            MethodTag::parse(name).ok_or_else(|| {
                format!(
                    "key '{key}': unknown method '{name}' \
                     (expected oracle, als_irls, als, student_t, mckf)"
                )
            })
        })
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(format!("key '{key}': empty method list"));
    }
    Ok(methods)
}

/// Apply one `key = value` assignment to the configuration.
pub fn apply_key(config: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    let exp = &mut config.experiment;
    match key {
        // model
        "f" => {
            let f = parse_matrix(key, value)?;
            let model = StateSpaceModel::new(f, exp.model.gw().clone(), exp.model.h().clone())
                .map_err(|e| format!("key 'f': {e}"))?;
            exp.model = model;
        }
        "gw" => {
            let gw = parse_matrix(key, value)?;
            let model = StateSpaceModel::new(exp.model.f().clone(), gw, exp.model.h().clone())
                .map_err(|e| format!("key 'gw': {e}"))?;
            exp.model = model;
        }
        "h" => {
            let h = parse_matrix(key, value)?;
            let model = StateSpaceModel::new(exp.model.f().clone(), exp.model.gw().clone(), h)
                .map_err(|e| format!("key 'h': {e}"))?;
            exp.model = model;
        }
        // truth and contamination
        "true_q" => exp.truth.q = parse_matrix(key, value)?,
        "true_r" => exp.truth.r = parse_matrix(key, value)?,
        "epsilon" => {
            exp.contamination = ContaminationSpec::new(parse_f64(key, value)?, exp.contamination.omega)
                .map_err(|e| format!("key '{key}': {e}"))?;
        }
        "omega" => {
            exp.contamination =
                ContaminationSpec::new(exp.contamination.epsilon, parse_f64(key, value)?)
                    .map_err(|e| format!("key '{key}': {e}"))?;
        }
        // experiment
        "n_trials" => exp.n_trials = parse_usize(key, value)?,
        "base_seed" => exp.base_seed = parse_u64(key, value)?,
        "eval_length" => exp.eval_length = parse_usize(key, value)?,
        "methods" => exp.methods = parse_methods(key, value)?,
        // estimator
        "lag_window" => exp.estimator.lag_window = parse_usize(key, value)?,
        "batch_length" => exp.estimator.batch_length = parse_usize(key, value)?,
        "warmup_length" => exp.estimator.warmup_length = parse_usize(key, value)?,
        "n_avg" => exp.estimator.n_avg = parse_usize(key, value)?,
        "q0" => exp.estimator.q0 = parse_matrix(key, value)?,
        "r0" => exp.estimator.r0 = parse_matrix(key, value)?,
        "gamma_thr" => exp.estimator.gamma_thr = parse_f64(key, value)?,
        "cleaning_enabled" => exp.estimator.cleaning_enabled = parse_bool(key, value)?,
        "robust_enabled" => exp.estimator.robust_enabled = parse_bool(key, value)?,
        "outer_tolerance" => exp.estimator.outer_tolerance = parse_f64(key, value)?,
        // Huber / IRLS
        "huber_c" => exp.estimator.huber.efficiency_constant = parse_f64(key, value)?,
        "huber_mad_factor" => exp.estimator.huber.mad_consistency_factor = parse_f64(key, value)?,
        "huber_max_iterations" => {
            exp.estimator.huber.max_iterations = parse_usize(key, value)?;
        }
        "huber_tolerance" => exp.estimator.huber.convergence_tolerance = parse_f64(key, value)?,
        "huber_delta_override" => {
            exp.estimator.huber.delta_override = if value.trim() == "none" {
                None
            } else {
                Some(parse_f64(key, value)?)
            };
        }
        // baselines
        "fixed_q" => exp.fixed_covariances.q = parse_matrix(key, value)?,
        "fixed_r" => exp.fixed_covariances.r = parse_matrix(key, value)?,
        "mckf_bandwidth" => exp.mckf_bandwidth = parse_f64(key, value)?,
        "mckf_max_fixed_point" => exp.mckf_max_fixed_point = parse_usize(key, value)?,
        "student_dof" => exp.student_dof = parse_f64(key, value)?,
        "student_vb_iterations" => exp.student_vb_iterations = parse_usize(key, value)?,
        // sweeps and extras
        "eps_sweep" => config.eps_sweep = parse_f64_list(key, value)?,
        "n_sweep" => {
            config.n_sweep = parse_usize_list(key, value)?;
            if config.n_sweep.is_empty() {
                return Err("key 'n_sweep': empty list".into());
            }
        }
        "sim_length" => config.sim_length = Some(parse_usize(key, value)?),
        "oracle_systems" => config.oracle_systems = parse_usize(key, value)?,
        other => return Err(format!("unknown configuration key '{other}'")),
    }
    // covariance inputs must be square and symmetric; surface the problem at
    // parse time rather than deep inside a run
    if matches!(key, "true_q" | "true_r" | "fixed_q" | "fixed_r" | "q0" | "r0") {
        let m = match key {
            "true_q" => &exp.truth.q,
            "true_r" => &exp.truth.r,
            "fixed_q" => &exp.fixed_covariances.q,
            "fixed_r" => &exp.fixed_covariances.r,
            "q0" => &exp.estimator.q0,
            _ => &exp.estimator.r0,
        };
        if m.nrows() != m.ncols() {
            return Err(format!("key '{key}': covariance must be square"));
        }
        if als_irls::linalg::relative_asymmetry(m) > 1e-12 {
            return Err(format!("key '{key}': covariance must be symmetric"));
        }
    }
    Ok(())
}

/// Parse a config file's contents into a configuration, starting from the
/// defaults.
pub fn parse_config(contents: &str, origin: &Path) -> Result<RunConfig, String> {
    let mut config = RunConfig::default();
    for (lineno, raw) in contents.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format!(
                "{}:{}: expected 'key = value', got '{line}'",
                origin.display(),
                lineno + 1
            )
        })?;
        apply_key(&mut config, key.trim(), value.trim())
            .map_err(|e| format!("{}:{}: {e}", origin.display(), lineno + 1))?;
    }
    Ok(config)
}

/// Apply `--set key=value` overrides.
pub fn apply_overrides(config: &mut RunConfig, overrides: &[String]) -> Result<(), String> {
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| format!("override '{entry}': expected key=value"))?;
        apply_key(config, key.trim(), value.trim())
            .map_err(|e| format!("override '{entry}': {e}"))?;
    }
    Ok(())
}

/// Serialize the effective configuration; parsing the result reproduces it
/// exactly.
pub fn echo_config(config: &RunConfig) -> String {
    let exp = &config.experiment;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("f", fmt_matrix(exp.model.f()));
    kv("gw", fmt_matrix(exp.model.gw()));
    kv("h", fmt_matrix(exp.model.h()));
    kv("true_q", fmt_matrix(&exp.truth.q));
    kv("true_r", fmt_matrix(&exp.truth.r));
    kv("epsilon", fmt_f64(exp.contamination.epsilon));
    kv("omega", fmt_f64(exp.contamination.omega));
    kv("n_trials", exp.n_trials.to_string());
    kv("base_seed", exp.base_seed.to_string());
    kv("eval_length", exp.eval_length.to_string());
    kv(
        "methods",
        exp.methods
            .iter()
            .map(|m| m.label())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("lag_window", exp.estimator.lag_window.to_string());
    kv("batch_length", exp.estimator.batch_length.to_string());
    kv("warmup_length", exp.estimator.warmup_length.to_string());
    kv("n_avg", exp.estimator.n_avg.to_string());
    kv("q0", fmt_matrix(&exp.estimator.q0));
    kv("r0", fmt_matrix(&exp.estimator.r0));
    kv("gamma_thr", fmt_f64(exp.estimator.gamma_thr));
    kv("cleaning_enabled", exp.estimator.cleaning_enabled.to_string());
    kv("robust_enabled", exp.estimator.robust_enabled.to_string());
    kv("outer_tolerance", fmt_f64(exp.estimator.outer_tolerance));
    kv("huber_c", fmt_f64(exp.estimator.huber.efficiency_constant));
    kv(
        "huber_mad_factor",
        fmt_f64(exp.estimator.huber.mad_consistency_factor),
    );
    kv(
        "huber_max_iterations",
        exp.estimator.huber.max_iterations.to_string(),
    );
    kv(
        "huber_tolerance",
        fmt_f64(exp.estimator.huber.convergence_tolerance),
    );
    kv(
        "huber_delta_override",
        exp.estimator
            .huber
            .delta_override
            .map(fmt_f64)
            .unwrap_or_else(|| "none".into()),
    );
    kv("fixed_q", fmt_matrix(&exp.fixed_covariances.q));
    kv("fixed_r", fmt_matrix(&exp.fixed_covariances.r));
    kv("mckf_bandwidth", fmt_f64(exp.mckf_bandwidth));
    kv("mckf_max_fixed_point", exp.mckf_max_fixed_point.to_string());
    kv("student_dof", fmt_f64(exp.student_dof));
    kv("student_vb_iterations", exp.student_vb_iterations.to_string());
    kv(
        "eps_sweep",
        config
            .eps_sweep
            .iter()
            .map(|&v| fmt_f64(v))
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "n_sweep",
        config
            .n_sweep
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("sim_length", config.effective_sim_length().to_string());
    kv("oracle_systems", config.oracle_systems.to_string());
    out
}
