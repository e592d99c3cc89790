//! Autocovariance least squares: the regression that maps the lagged
//! innovation autocovariances of a fixed-gain predictor linearly onto
//! `[vec(Q); vec(R)]`.
//!
//! For the closed loop `Fbar = F - F K H` the residual covariance `P` solves
//! `P = Fbar P Fbar^T + Gw Q Gw^T + FK R (FK)^T`, and the innovation
//! autocovariances are
//!
//! ```text
//! C_0 = H P H^T + R
//! C_j = H Fbar^j P H^T - H Fbar^{j-1} F K R        (j >= 1)
//! ```
//!
//! Vectorizing through the Kronecker identity `vec(AXB) = (B^T (x) A) vec(X)`
//! turns the stack of `C_0 .. C_{N-1}` into `A [vec(Q); vec(R)]` with
//!
//! ```text
//! D_j = (H (x) H Fbar^j) (I - Fbar (x) Fbar)^{-1}
//! A_j = [ D_j (Gw (x) Gw),  D_j (FK (x) FK) + (I (x) Gamma_j) ]
//! ```
//!
//! where `Gamma_0 = I` and `Gamma_j = -H Fbar^{j-1} F K`. Rows are grouped by
//! lag so the observation vector is the concatenation of `vec(C_j)` blocks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kalman::{closed_loop, residual_noise_input, solve_residual_lyapunov, steady_state_gain};
use crate::linalg;
use crate::ssm::{NoiseCovariances, StateSpaceModel};

/// Assembled ALS design matrix.
#[derive(Debug, Clone)]
pub struct AlsDesign {
    /// `N * n_z^2` rows by `n_w^2 + n_z^2` columns.
    pub a: DMatrix<f64>,
    /// Lag-window size the matrix was built for.
    pub n: usize,
    /// Hash of `(F, Gw, H, K)` used to build the matrix.
    pub model_fingerprint: u64,
    /// Set when there are fewer equations than unknowns.
    pub underdetermined: bool,
}

/// Empirical lagged autocovariances stacked into an observation vector.
#[derive(Debug, Clone)]
pub struct AutocovEstimate {
    /// `[vec(C_0); ...; vec(C_{N-1})]`, length `N * n_z^2`.
    pub b: DVector<f64>,
    /// Retained innovation pairs per lag.
    pub pair_counts: Vec<usize>,
    /// Sorted 0-based indices excluded by cleaning (empty without cleaning).
    pub flagged_indices: Vec<usize>,
}

/// Least-squares solve outcome.
#[derive(Debug, Clone)]
pub struct OlsSolution {
    /// `[vec(Q); vec(R)]` estimate.
    pub theta: DVector<f64>,
    /// Numerical rank of the design matrix.
    pub rank: usize,
    /// Set when the system was underdetermined and the minimum-norm solution
    /// was returned.
    pub min_norm: bool,
}

fn fingerprint(model: &StateSpaceModel, k: &DMatrix<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for m in [model.f(), model.gw(), model.h(), k] {
        m.nrows().hash(&mut h);
        m.ncols().hash(&mut h);
        for v in m.iter() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Build the design matrix for gain `k` and lag window `n`.
///
/// Hard error when `rho(Fbar) >= 1`; an underdetermined shape only sets the
/// flag on the result.
pub fn build_design_matrix(
    model: &StateSpaceModel,
    k: &DMatrix<f64>,
    n: usize,
) -> Result<AlsDesign> {
    if n == 0 {
        return Err(Error::Validation("lag window N must be >= 1".into()));
    }
    if k.nrows() != model.n_x() || k.ncols() != model.n_z() {
        return Err(Error::Validation(format!(
            "gain must be {}x{}, got {}x{}",
            model.n_x(),
            model.n_z(),
            k.nrows(),
            k.ncols()
        )));
    }
    let fbar = closed_loop(model, k);
    let rho = linalg::spectral_radius(&fbar);
    if rho >= 1.0 {
        return Err(Error::Numerical(format!(
            "design matrix requires a stable closed loop: rho(Fbar) = {rho:.6}"
        )));
    }
    let n_x = model.n_x();
    let n_w = model.n_w();
    let n_z = model.n_z();
    let h = model.h();
    let fk = model.f() * k;

    // (I - Fbar (x) Fbar)^{-1}, shared by every lag block
    let lyap_inv = (DMatrix::<f64>::identity(n_x * n_x, n_x * n_x) - fbar.kronecker(&fbar))
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I - Fbar (x) Fbar is singular".into()))?;
    let gw_kron = model.gw().kronecker(model.gw());
    let fk_kron = fk.kronecker(&fk);
    let identity_z = DMatrix::<f64>::identity(n_z, n_z);

    let rows = n * n_z * n_z;
    let cols = n_w * n_w + n_z * n_z;
    let mut a = DMatrix::zeros(rows, cols);
    // holds H Fbar^{j-1} at the top of iteration j >= 1
    let mut h_fbar_pow = h.clone();
    for j in 0..n {
        let gamma_j = if j == 0 {
            identity_z.clone()
        } else {
            -(&h_fbar_pow * &fk)
        };
        if j > 0 {
            h_fbar_pow *= &fbar;
        }
        let d_j = h.kronecker(&h_fbar_pow) * &lyap_inv;
        let q_block = &d_j * &gw_kron;
        let r_block = &d_j * &fk_kron + identity_z.kronecker(&gamma_j);
        let row0 = j * n_z * n_z;
        a.view_mut((row0, 0), (n_z * n_z, n_w * n_w))
            .copy_from(&q_block);
        a.view_mut((row0, n_w * n_w), (n_z * n_z, n_z * n_z))
            .copy_from(&r_block);
    }
    Ok(AlsDesign {
        a,
        n,
        model_fingerprint: fingerprint(model, k),
        underdetermined: rows < cols,
    })
}

/// Stack the model-implied autocovariances `vec(C_0) .. vec(C_{N-1})` for a
/// predictor with gain `k` when the data-generating covariances are `noise`.
///
/// Computed directly from the Lyapunov solution, independently of
/// [`build_design_matrix`]; the two routes agreeing on `A theta = b` is the
/// module's defining correctness property.
pub fn theoretical_autocov(
    model: &StateSpaceModel,
    k: &DMatrix<f64>,
    noise: &NoiseCovariances,
    n: usize,
) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::Validation("lag window N must be >= 1".into()));
    }
    let fbar = closed_loop(model, k);
    let (g, sigma) = residual_noise_input(model, k, noise);
    let p_eps = solve_residual_lyapunov(&fbar, &g, &sigma)?;
    let h = model.h();
    let fk = model.f() * k;
    let n_z = model.n_z();

    let mut b = DVector::zeros(n * n_z * n_z);
    // holds Fbar^{j-1} while processing lag j >= 1
    let mut fbar_pow = DMatrix::<f64>::identity(model.n_x(), model.n_x());
    for j in 0..n {
        let c_j = if j == 0 {
            h * &p_eps * h.transpose() + &noise.r
        } else {
            let h_prev = h * &fbar_pow; // H Fbar^{j-1}
            &h_prev * &fbar * &p_eps * h.transpose() - &h_prev * &fk * &noise.r
        };
        if j > 0 {
            fbar_pow *= &fbar;
        }
        b.rows_mut(j * n_z * n_z, n_z * n_z)
            .copy_from(&linalg::vec_stack(&c_j));
    }
    Ok(b)
}

/// Empirical lagged autocovariances
/// `C_j = (1 / count_j) sum_k e_{k+j} e_k^T`
/// over all `k` where neither endpoint is flagged.
///
/// `flagged` holds 0-based indices into `innovations`; with no flags the
/// divisor at lag `j` is exactly `tau - j`.
pub fn empirical_autocov(
    innovations: &[DVector<f64>],
    n: usize,
    flagged: &[usize],
) -> Result<AutocovEstimate> {
    let tau = innovations.len();
    if n == 0 {
        return Err(Error::Validation("lag window N must be >= 1".into()));
    }
    if tau < n {
        return Err(Error::Validation(format!(
            "need at least N = {n} innovations, got {tau}"
        )));
    }
    let n_z = innovations[0].len();
    if innovations.iter().any(|e| e.len() != n_z) {
        return Err(Error::Validation("ragged innovation sequence".into()));
    }
    let mut mask = vec![false; tau];
    for &idx in flagged {
        if idx >= tau {
            return Err(Error::Validation(format!(
                "flagged index {idx} out of range (tau = {tau})"
            )));
        }
        mask[idx] = true;
    }
    let mut flagged_indices: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
    flagged_indices.dedup();

    let mut b = DVector::zeros(n * n_z * n_z);
    let mut pair_counts = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = DMatrix::<f64>::zeros(n_z, n_z);
        let mut count = 0usize;
        for k in 0..tau - j {
            if mask[k] || mask[k + j] {
                continue;
            }
            acc += &innovations[k + j] * innovations[k].transpose();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Numerical(format!("all pairs flagged at lag {j}")));
        }
        acc /= count as f64;
        b.rows_mut(j * n_z * n_z, n_z * n_z)
            .copy_from(&linalg::vec_stack(&acc));
        pair_counts.push(count);
    }
    Ok(AutocovEstimate {
        b,
        pair_counts,
        flagged_indices,
    })
}

/// Ordinary least squares through a rank-revealing SVD (never the literal
/// normal equations).
///
/// Overdetermined full-rank systems get the unique LS solution;
/// underdetermined full-row-rank systems get the minimum-norm solution with
/// `min_norm` set; genuine rank deficiency is a hard error reporting the
/// numerical rank.
pub fn ols_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<OlsSolution> {
    let sol = linalg::lstsq(a, b)?;
    let full = a.nrows().min(a.ncols());
    if sol.rank < full {
        return Err(Error::Numerical(format!(
            "design matrix is rank deficient: rank {} of {}",
            sol.rank, full
        )));
    }
    Ok(OlsSolution {
        theta: sol.solution,
        rank: sol.rank,
        min_norm: a.nrows() < a.ncols(),
    })
}

/// Reshape `theta = [vec(Q); vec(R)]` back into matrices, restoring symmetry
/// by averaging with the transpose.
pub fn unpack_theta(theta: &DVector<f64>, n_w: usize, n_z: usize) -> Result<NoiseCovariances> {
    if theta.len() != n_w * n_w + n_z * n_z {
        return Err(Error::Validation(format!(
            "theta has length {}, expected {}",
            theta.len(),
            n_w * n_w + n_z * n_z
        )));
    }
    let q_part = DVector::from_column_slice(&theta.as_slice()[..n_w * n_w]);
    let r_part = DVector::from_column_slice(&theta.as_slice()[n_w * n_w..]);
    let q = linalg::symmetrize(&linalg::unvec(&q_part, n_w, n_w)?);
    let r = linalg::symmetrize(&linalg::unvec(&r_part, n_z, n_z)?);
    Ok(NoiseCovariances { q, r })
}

/// Inverse of [`unpack_theta`] for symmetric inputs.
pub fn pack_theta(covs: &NoiseCovariances) -> DVector<f64> {
    let n_w = covs.q.nrows();
    let n_z = covs.r.nrows();
    let mut theta = DVector::zeros(n_w * n_w + n_z * n_z);
    theta
        .rows_mut(0, n_w * n_w)
        .copy_from(&linalg::vec_stack(&covs.q));
    theta
        .rows_mut(n_w * n_w, n_z * n_z)
        .copy_from(&linalg::vec_stack(&covs.r));
    theta
}

/// Project both covariances onto the PSD cone by clipping negative
/// eigenvalues to zero. Idempotent, and the identity on PSD inputs.
pub fn project_psd(covs: &NoiseCovariances) -> NoiseCovariances {
    NoiseCovariances {
        q: linalg::project_psd_matrix(&covs.q),
        r: linalg::project_psd_matrix(&covs.r),
    }
}

/// One randomly generated stable test system with PSD covariances.
struct RandomSystem {
    model: StateSpaceModel,
    noise: NoiseCovariances,
    n: usize,
}

fn random_system(rng: &mut ChaCha8Rng) -> Result<RandomSystem> {
    let n_x = rng.random_range(1..=4usize);
    let n_z = rng.random_range(1..=2usize);
    let n_w = rng.random_range(1..=n_x);
    let normal =
        |r: usize, c: usize, rng: &mut ChaCha8Rng| -> DMatrix<f64> {
            DMatrix::from_iterator(r, c, (0..r * c).map(|_| StandardNormal.sample(rng)))
        };
    // scale a random matrix to a target spectral radius in [0.2, 0.9]
    let raw = normal(n_x, n_x, rng);
    let rho = linalg::spectral_radius(&raw).max(1e-6);
    let target = rng.random_range(0.2..0.9);
    let f = raw * (target / rho);
    let gw = normal(n_x, n_w, rng);
    let h = normal(n_z, n_x, rng);
    let model = StateSpaceModel::new(f, gw, h)?;

    let mq = normal(n_w, n_w, rng);
    let mr = normal(n_z, n_z, rng);
    let q = &mq * mq.transpose();
    let r = &mr * mr.transpose() + DMatrix::identity(n_z, n_z).scale(0.1);
    let noise = NoiseCovariances::new(linalg::symmetrize(&q), linalg::symmetrize(&r))?;
    let n = rng.random_range(3..=15usize);
    Ok(RandomSystem { model, noise, n })
}

/// Exercise the defining identity `A [vec(Q); vec(R)] = theoretical_autocov`
/// over `n_systems` random stable systems; returns the worst relative error.
///
/// This is the oracle consistency suite behind the `oracle-check` command.
pub fn oracle_identity_max_error(n_systems: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut produced = 0usize;
    while produced < n_systems {
        let sys = random_system(&mut rng)?;
        let gain = steady_state_gain(&sys.model, &sys.noise)?;
        if !gain.converged {
            continue;
        }
        if linalg::spectral_radius(&closed_loop(&sys.model, &gain.k)) >= 1.0 {
            continue;
        }
        let design = build_design_matrix(&sys.model, &gain.k, sys.n)?;
        let theo = theoretical_autocov(&sys.model, &gain.k, &sys.noise, sys.n)?;
        let predicted = &design.a * pack_theta(&sys.noise);
        let denom = theo.norm().max(1e-300);
        worst = worst.max((predicted - theo).norm() / denom);
        produced += 1;
    }
    Ok(worst)
}
