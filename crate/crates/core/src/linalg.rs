//! Small dense solves with explicit conditioning checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Reciprocal condition threshold below which a matrix counts as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Reciprocal 2-norm condition number from the singular values.
pub fn rcond(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 || !max.is_finite() {
        0.0
    } else {
        min / max
    }
}

/// Solves `a x = b` through an SVD, refusing near-singular systems.
pub fn solve_svd(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let rc = if max > 0.0 && max.is_finite() { min / max } else { 0.0 };
    if rc < RCOND_THRESHOLD {
        return Err(Error::Singular { what, rcond: rc });
    }
    svd.solve(b, 0.0)
        .map_err(|_| Error::Singular { what, rcond: rc })
}

/// Solves `a x = b` with full-pivot LU after the same conditioning check.
pub fn solve_lu(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let rc = rcond(a);
    if rc < RCOND_THRESHOLD {
        return Err(Error::Singular { what, rcond: rc });
    }
    a.clone()
        .full_piv_lu()
        .solve(b)
        .ok_or(Error::Singular { what, rcond: rc })
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(solve_svd(&a, &b, "a"), Err(Error::Singular { .. })));
        assert!(matches!(solve_lu(&a, &b, "a"), Err(Error::Singular { .. })));
    }

    #[test]
    fn both_routes_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x1 = solve_svd(&a, &b, "a").unwrap();
        let x2 = solve_lu(&a, &b, "a").unwrap();
        assert!(max_abs_diff(&x1, &x2) < 1e-14);
        assert!((&a * &x1 - &b).norm() < 1e-14);
    }
}
