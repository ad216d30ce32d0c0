use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

/// Outcome of a symmetric positive-definite solve.
#[derive(Debug, Clone)]
pub struct SpdSolveReport {
    pub solution: DVector<f64>,
    /// Smallest Cholesky pivot (the squared diagonal of the factor).
    pub min_pivot: f64,
    /// Spectral condition number, largest over smallest eigenvalue.
    pub condition: f64,
    /// `‖A x − b‖ / ‖b‖` after refinement (0 when `b = 0`).
    pub relative_residual: f64,
}

/// Solve `A x = b` for symmetric positive-definite `A` by Cholesky, with one
/// round of iterative refinement.
pub fn spd_solve(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<SpdSolveReport> {
    let m = matrix.nrows();
    if matrix.ncols() != m || rhs.len() != m {
        return Err(Error::Usage(format!(
            "spd_solve shape mismatch: {}x{} matrix, rhs of length {}",
            m,
            matrix.ncols(),
            rhs.len()
        )));
    }
    if m == 0 {
        return Err(Error::Usage("spd_solve on an empty system".into()));
    }
    let scale = matrix.amax().max(f64::MIN_POSITIVE);
    for i in 0..m {
        for j in 0..i {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Usage(format!(
                    "spd_solve requires a symmetric matrix (entry ({i},{j}) differs)"
                )));
            }
        }
    }

    let max_diag = (0..m).map(|i| matrix[(i, i)]).fold(0.0f64, f64::max);
    let mut lower = DMatrix::<f64>::zeros(m, m);
    let mut min_pivot = f64::INFINITY;
    for j in 0..m {
        let mut pivot = matrix[(j, j)];
        for k in 0..j {
            pivot -= lower[(j, k)] * lower[(j, k)];
        }
        min_pivot = min_pivot.min(pivot);
        if !(pivot >= PIVOT_TOLERANCE * max_diag) || max_diag <= 0.0 {
            return Err(Error::SingularFisher {
                pivot,
                scale: max_diag,
            });
        }
        let diag = pivot.sqrt();
        lower[(j, j)] = diag;
        for i in (j + 1)..m {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = s / diag;
        }
    }

    let solve = |b: &DVector<f64>| -> DVector<f64> {
        let mut y = b.clone();
        for i in 0..m {
            for k in 0..i {
                y[i] -= lower[(i, k)] * y[k];
            }
            y[i] /= lower[(i, i)];
        }
        for i in (0..m).rev() {
            for k in (i + 1)..m {
                y[i] -= lower[(k, i)] * y[k];
            }
            y[i] /= lower[(i, i)];
        }
        y
    };

    let mut x = solve(rhs);
    let residual = rhs - matrix * &x;
    x += solve(&residual);
    let residual = rhs - matrix * &x;
    let bnorm = rhs.norm();
    let relative_residual = if bnorm > 0.0 {
        residual.norm() / bnorm
    } else {
        residual.norm()
    };

    let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };

    Ok(SpdSolveReport {
        solution: x,
        min_pivot,
        condition,
        relative_residual,
    })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(matrix: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
    (eig.min(), eig.max())
}

/// Solve a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
) -> Result<()> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Usage("tridiagonal band lengths disagree".into()));
    }
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 {
            return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}
