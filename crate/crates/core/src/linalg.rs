//! Dense Cholesky machinery: jittered factorization and its directional
//! derivative.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{CkgError, Result};

/// Jitter escalation ladder, as multiples of the mean diagonal.
const JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];

fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn try_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(a.clone()).map(|c| c.l())
}

/// Lower-triangular factor of `a + j*I`, with `j` escalated through
/// `{1e-10, 1e-8, 1e-6}` times the mean diagonal only when the plain
/// factorization fails. Returns the factor and the jitter actually applied.
///
/// A zero or negative mean diagonal (an all-zero covariance block is legal at
/// fully observed noise-free points) falls back to absolute jitter levels.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let s = a.nrows();
    if s == 0 || a.ncols() != s {
        return Err(CkgError::invalid(format!(
            "cholesky needs a square nonempty matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.diagonal().amax().max(1.0);
    if symmetry_defect(a) > 1e-10 * scale {
        return Err(CkgError::invalid(
            "cholesky input is not symmetric within tolerance".to_string(),
        ));
    }
    // Symmetrize exactly so the factor does not depend on which triangle the
    // caller filled more accurately.
    let sym = (a + a.transpose()) * 0.5;
    if let Some(l) = try_factor(&sym) {
        return Ok((l, 0.0));
    }
    let mean_diag = sym.diagonal().mean();
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for level in JITTER_LEVELS {
        let jitter = level * base;
        let mut bumped = sym.clone();
        for i in 0..s {
            bumped[(i, i)] += jitter;
        }
        if let Some(l) = try_factor(&bumped) {
            return Ok((l, jitter));
        }
    }
    Err(CkgError::degenerate(format!(
        "cholesky failed for {s}x{s} matrix even at max jitter {:.1e}",
        JITTER_LEVELS[2] * base
    )))
}

/// Forward-mode derivative of the Cholesky factor: given `L` with
/// `L L^T = A` and a symmetric perturbation `dA`, returns the lower
/// triangular `dL` solving `dL L^T + L dL^T = dA`.
///
/// Computed as `dL = L phi(L^{-1} dA L^{-T})` where `phi` keeps the strict
/// lower triangle and halves the diagonal.
pub fn cholesky_derivative(l: &DMatrix<f64>, da: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = l.nrows();
    if l.ncols() != s || da.nrows() != s || da.ncols() != s {
        return Err(CkgError::invalid(
            "cholesky_derivative: dimension mismatch".to_string(),
        ));
    }
    for i in 0..s {
        if l[(i, i)] <= 0.0 {
            return Err(CkgError::degenerate(
                "cholesky_derivative: factor has a non-positive diagonal".to_string(),
            ));
        }
    }
    let x = l
        .solve_lower_triangular(da)
        .ok_or_else(|| CkgError::degenerate("singular factor in forward solve".to_string()))?;
    // y = X L^{-T}  via  y^T = L^{-1} X^T
    let yt = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| CkgError::degenerate("singular factor in transposed solve".to_string()))?;
    let y = yt.transpose();
    let mut phi = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..i {
            phi[(i, j)] = y[(i, j)];
        }
        phi[(i, i)] = 0.5 * y[(i, i)];
    }
    Ok(l * phi)
}
