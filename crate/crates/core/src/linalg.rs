//! Small dense linear-algebra helpers used throughout the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Column-major stacking of a matrix into a vector.
pub fn vec_stack(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_stack`]: reshape a vector into an `nrows x ncols` matrix.
pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if v.len() != nrows * ncols {
        return Err(Error::Validation(format!(
            "cannot reshape vector of length {} into {}x{}",
            v.len(),
            nrows,
            ncols
        )));
    }
    Ok(DMatrix::from_column_slice(nrows, ncols, v.as_slice()))
}

/// Largest relative asymmetry `|M - M^T| / max(|M|, 1e-300)` over all entries.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs() / scale);
        }
    }
    worst
}

/// A factor `L` with `L L^T = M` for a symmetric PSD matrix, tolerating
/// round-off.
///
/// The input is symmetrized first. A plain Cholesky factorization is the fast
/// path; if it fails (semidefinite or slightly indefinite input) an
/// eigendecomposition is used with negative eigenvalues floored at zero.
/// Eigenvalues below `-1e-10 * max(trace, 1e-300)` are a hard error.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = sym.symmetric_eigen();
    let tol = 1e-10 * eig.eigenvalues.iter().sum::<f64>().abs().max(1e-300);
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::Numerical(format!(
            "matrix is not positive semidefinite (min eigenvalue {:.3e})",
            eig.eigenvalues.min()
        )));
    }
    let mut factor = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for i in 0..factor.nrows() {
            factor[(i, j)] *= s;
        }
    }
    Ok(factor)
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues to zero (the Frobenius-nearest PSD matrix).
pub fn project_psd_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    clip_eigenvalues(m, 0.0)
}

/// Reconstruct the symmetrized matrix with every eigenvalue floored at `floor`.
pub fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let lc = l.max(floor);
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= lc;
        }
    }
    symmetrize(&(scaled * eig.eigenvectors.transpose()))
}

/// Least-squares solution of an overdetermined or underdetermined system.
#[derive(Debug, Clone)]
pub struct Lstsq {
    /// Minimum-norm least-squares solution.
    pub solution: DVector<f64>,
    /// Numerical rank of the matrix.
    pub rank: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

/// SVD-based least squares: minimizes `|A x - b|` and, among minimizers,
/// `|x|`. Singular values below `1e-12 * sigma_max` are treated as zero.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Lstsq> {
    if a.nrows() != b.len() {
        return Err(Error::Validation(format!(
            "lstsq: matrix has {} rows but vector has length {}",
            a.nrows(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let smax = sv.first().copied().unwrap_or(0.0);
    let eps = 1e-12 * smax.max(1e-300);
    let rank = sv.iter().filter(|&&s| s > eps).count();
    let solution = svd
        .solve(b, eps)
        .map_err(|e| Error::Numerical(format!("SVD solve failed: {e}")))?;
    Ok(Lstsq {
        solution,
        rank,
        singular_values: sv,
    })
}

/// Ratio of the largest to smallest singular value (`inf` when singular).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}
