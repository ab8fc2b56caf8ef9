//! Stacking weights under each constraint regime.
//!
//! The closed forms (`T^{-1} c`, `U^{-1} 1_J` rescaled, `(e'e)^{-1} 1_J`
//! rescaled) are computed through an SVD. [`kkt_oracle`] solves the bordered
//! normal equations with a pivoted LU instead and is the reference every
//! closed form is checked against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, solve_lu, solve_svd};
use crate::objective::stacking_error;
use crate::types::{ConstraintSpec, LooMatrix, WeightSolution};

/// Relative tolerance at which a closed form must reproduce the oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

/// Cross-product matrices of a held-out prediction matrix and its response.
#[derive(Debug, Clone)]
pub struct SolverMatrices {
    /// `T[l, j] = sum_i preds[i, l] * preds[i, j]`.
    pub t: DMatrix<f64>,
    /// `c[j] = sum_i y_i * preds[i, j]`.
    pub c: DVector<f64>,
    /// `ehat[i, j] = y_i - preds[i, j]`.
    pub ehat: DMatrix<f64>,
    pub ones: DVector<f64>,
    yy: f64,
}

impl SolverMatrices {
    pub fn new(loo: &LooMatrix, y: &DVector<f64>) -> Result<Self> {
        check_rows(loo, y)?;
        let preds = loo.preds();
        let j = loo.n_models();
        let mut ehat = preds.clone();
        for (col_idx, mut col) in ehat.column_iter_mut().enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = y[i] - preds[(i, col_idx)];
            }
        }
        Ok(SolverMatrices {
            t: preds.transpose() * preds,
            c: preds.transpose() * y,
            ehat,
            ones: DVector::from_element(j, 1.0),
            yy: y.norm_squared(),
        })
    }

    /// `U[l, j] = sum_i (y_i/m - preds[i, j]) preds[i, l] - sum_i (y_i - preds[i, j]) y_i`.
    ///
    /// Row index `l` pairs with the `y_i/m` term (giving `c[l]/m`) and column
    /// index `j` with the `y_i` term; this is the convention under which
    /// `U w` is proportional to `1_J` at the constrained optimum. The
    /// transposed reading does not reproduce the KKT solution.
    pub fn u(&self, m: f64) -> DMatrix<f64> {
        let j = self.c.len();
        DMatrix::from_fn(j, j, |l, col| {
            self.c[l] / m - self.t[(l, col)] - (self.yy - self.c[col])
        })
    }

    /// `ehat' ehat`.
    pub fn residual_gram(&self) -> DMatrix<f64> {
        self.ehat.transpose() * &self.ehat
    }
}

fn check_rows(loo: &LooMatrix, y: &DVector<f64>) -> Result<()> {
    if y.len() != loo.n() {
        return Err(Error::DimensionMismatch {
            axis: "observations (rows)",
            expected: loo.n(),
            found: y.len(),
        });
    }
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "y", index });
    }
    Ok(())
}

fn require_well_posed(loo: &LooMatrix) -> Result<()> {
    if loo.n() < loo.n_models() {
        return Err(Error::invalid(format!(
            "need at least as many observations as models, got n={} and J={}",
            loo.n(),
            loo.n_models()
        )));
    }
    Ok(())
}

fn finish(
    loo: &LooMatrix,
    y: &DVector<f64>,
    w: DVector<f64>,
    constraint: ConstraintSpec,
) -> Result<WeightSolution> {
    let q = stacking_error(loo, y, &w)?;
    Ok(WeightSolution { w, constraint, q })
}

fn rescale(v: DVector<f64>, m: f64) -> Result<DVector<f64>> {
    let s = v.sum();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::ZeroDirectionSum { m });
    }
    let mut w = v * (m / s);
    // Absorb the last rounding error so the sum is exact to working precision.
    let drift = m - w.sum();
    let last = w.len() - 1;
    w[last] += drift;
    Ok(w)
}

fn oracle_gap(closed: &DVector<f64>, oracle: &DVector<f64>) -> Result<()> {
    let scale = oracle.amax().max(1.0);
    let diff = max_abs_diff(closed, oracle);
    if diff > ORACLE_TOLERANCE * scale {
        return Err(Error::OracleDisagreement {
            max_diff: diff,
            tol: ORACLE_TOLERANCE * scale,
        });
    }
    Ok(())
}

/// Unconstrained minimizer `w = T^{-1} c`.
pub fn solve_unconstrained(loo: &LooMatrix, y: &DVector<f64>) -> Result<WeightSolution> {
    require_well_posed(loo)?;
    let mats = SolverMatrices::new(loo, y)?;
    let w = solve_svd(&mats.t, &mats.c, "T (cross-products of held-out predictions)")?;
    finish(loo, y, w, ConstraintSpec::Unconstrained)
}

/// Minimizer subject to `sum_j w_j = m`, via `w proportional to U^{-1} 1_J`.
///
/// The result is checked against [`kkt_oracle`]; a disagreement beyond
/// [`ORACLE_TOLERANCE`] (relative to the largest weight) is an error.
pub fn solve_sum_to_m(loo: &LooMatrix, y: &DVector<f64>, m: f64) -> Result<WeightSolution> {
    let constraint = ConstraintSpec::sum_to(m)?;
    check_rows(loo, y)?;
    if loo.n_models() == 1 {
        return finish(loo, y, DVector::from_element(1, m), constraint);
    }
    let mats = SolverMatrices::new(loo, y)?;
    let v = solve_svd(&mats.u(m), &mats.ones, "U")?;
    let w = rescale(v, m)?;
    let oracle = kkt_oracle(loo, y, Some(m))?;
    oracle_gap(&w, &oracle.w)?;
    finish(loo, y, w, constraint)
}

/// Minimizer subject to `sum_j w_j = 1`, via `w proportional to (e'e)^{-1} 1_J`.
pub fn solve_sum_to_one(loo: &LooMatrix, y: &DVector<f64>) -> Result<WeightSolution> {
    check_rows(loo, y)?;
    let constraint = ConstraintSpec::SumTo(1.0);
    if loo.n_models() == 1 {
        return finish(loo, y, DVector::from_element(1, 1.0), constraint);
    }
    let mats = SolverMatrices::new(loo, y)?;
    let v = solve_svd(&mats.residual_gram(), &mats.ones, "residual Gram matrix e'e")?;
    let w = rescale(v, 1.0)?;
    finish(loo, y, w, constraint)
}

/// Direct equality-constrained least squares.
///
/// With `m = Some(m)` this solves `[2T, 1; 1', 0] [w; lambda] = [2c; m]`; with
/// `None` it solves `T w = c`. The constraint row is scaled to the magnitude
/// of `T` before factorizing so the conditioning test is not dominated by
/// units.
pub fn kkt_oracle(loo: &LooMatrix, y: &DVector<f64>, m: Option<f64>) -> Result<WeightSolution> {
    check_rows(loo, y)?;
    let preds = loo.preds();
    let j = loo.n_models();
    let mut t = DMatrix::zeros(j, j);
    let mut c = DVector::zeros(j);
    for i in 0..loo.n() {
        for l in 0..j {
            c[l] += y[i] * preds[(i, l)];
            for k in 0..j {
                t[(l, k)] += preds[(i, l)] * preds[(i, k)];
            }
        }
    }
    match m {
        None => {
            require_well_posed(loo)?;
            let w = solve_lu(&t, &c, "T in the unconstrained normal equations")?;
            finish(loo, y, w, ConstraintSpec::Unconstrained)
        }
        Some(m) => {
            let constraint = ConstraintSpec::sum_to(m)?;
            let scale = {
                let d = (0..j).map(|l| 2.0 * t[(l, l)]).sum::<f64>() / j as f64;
                if d > 0.0 && d.is_finite() {
                    d
                } else {
                    1.0
                }
            };
            let mut a = DMatrix::zeros(j + 1, j + 1);
            let mut b = DVector::zeros(j + 1);
            for l in 0..j {
                for k in 0..j {
                    a[(l, k)] = 2.0 * t[(l, k)];
                }
                a[(l, j)] = scale;
                a[(j, l)] = scale;
                b[l] = 2.0 * c[l];
            }
            b[j] = scale * m;
            let sol = solve_lu(&a, &b, "bordered KKT system")?;
            let w = DVector::from_iterator(j, sol.iter().take(j).copied());
            finish(loo, y, w, constraint)
        }
    }
}

/// The unconstrained solve applied to function evaluations `f_{j,-i}(x_i)`.
///
/// Stacking in a function space with the empirical inner product reduces to
/// the same normal equations; this entry point exists for callers holding
/// evaluation matrices rather than held-out prediction matrices.
pub fn solve_in_hilbert(evaluations: &DMatrix<f64>, y: &DVector<f64>) -> Result<WeightSolution> {
    let loo = LooMatrix::from_predictions(evaluations.clone())?;
    solve_unconstrained(&loo, y)
}

/// Solves under an arbitrary [`ConstraintSpec`].
pub fn solve(loo: &LooMatrix, y: &DVector<f64>, constraint: ConstraintSpec) -> Result<WeightSolution> {
    match constraint {
        ConstraintSpec::Unconstrained => solve_unconstrained(loo, y),
        ConstraintSpec::SumTo(m) => solve_sum_to_m(loo, y, m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngPlan;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_instance(seed: u64, n: usize, j: usize) -> (LooMatrix, DVector<f64>) {
        let mut rng = RngPlan::new(seed).substream("solver-test", 0).rng();
        let preds = DMatrix::from_fn(n, j, |_, _| rng.sample::<f64, _>(StandardNormal));
        let truth = DVector::from_fn(j, |_, _| rng.random_range(-1.0..1.0));
        let y = &preds * truth + DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        (LooMatrix::from_predictions(preds).unwrap(), y)
    }

    fn assert_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) {
        let scale = b.amax().max(1.0);
        let d = max_abs_diff(a, b);
        assert!(d <= tol * scale, "max diff {d:e} > {tol:e}: {a} vs {b}");
    }

    /// Columns orthonormal under the plain dot product, built by hand.
    fn orthonormal_instance() -> (LooMatrix, DVector<f64>) {
        let s = 0.5;
        let preds = DMatrix::from_row_slice(4, 2, &[s, s, s, -s, s, s, s, -s]);
        let y = DVector::from_vec(vec![1.0, 3.0, -2.0, 0.5]);
        (LooMatrix::from_predictions(preds).unwrap(), y)
    }

    /// Two orthogonal columns with equal norms and equal correlation with y,
    /// so swapping them leaves the problem unchanged.
    fn symmetric_orthogonal_instance() -> (LooMatrix, DVector<f64>) {
        let preds = DMatrix::from_row_slice(
            6,
            2,
            &[0.9, 0.0, 1.1, 0.0, -0.4, 0.0, 0.0, 0.9, 0.0, 1.1, 0.0, -0.4],
        );
        let y = DVector::from_vec(vec![1.0, 1.3, -0.2, 1.0, 1.3, -0.2]);
        (LooMatrix::from_predictions(preds).unwrap(), y)
    }

    #[test]
    fn orthonormal_columns_give_inner_products() {
        let (loo, y) = orthonormal_instance();
        let expected = loo.preds().transpose() * &y;
        let sol = solve_unconstrained(&loo, &y).unwrap();
        assert_close(&sol.w, &expected, 1e-12);
        let oracle = kkt_oracle(&loo, &y, None).unwrap();
        assert_close(&oracle.w, &expected, 1e-12);
    }

    #[test]
    fn perfect_single_predictor() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let loo = LooMatrix::from_predictions(DMatrix::from_column_slice(3, 1, y.as_slice())).unwrap();
        let sol = solve_unconstrained(&loo, &y).unwrap();
        assert!((sol.w[0] - 1.0).abs() < 1e-14);
        assert!(sol.q < 1e-24);
        assert_eq!(sol.constraint, ConstraintSpec::Unconstrained);
    }

    #[test]
    fn unconstrained_matches_oracle_on_random_instance() {
        let (loo, y) = random_instance(1, 50, 3);
        let a = solve_unconstrained(&loo, &y).unwrap();
        let b = kkt_oracle(&loo, &y, None).unwrap();
        assert_close(&a.w, &b.w, 1e-8);
    }

    #[test]
    fn sum_to_m_matches_oracle_on_random_instance() {
        let (loo, y) = random_instance(2, 50, 4);
        let a = solve_sum_to_m(&loo, &y, 1.3).unwrap();
        let b = kkt_oracle(&loo, &y, Some(1.3)).unwrap();
        assert_close(&a.w, &b.w, 1e-8);
        assert!(a.constraint.is_satisfied_by(&a.w));
    }

    #[test]
    fn sum_to_one_matches_oracle_and_sum_to_m() {
        let (loo, y) = random_instance(3, 40, 3);
        let a = solve_sum_to_one(&loo, &y).unwrap();
        let b = kkt_oracle(&loo, &y, Some(1.0)).unwrap();
        assert_close(&a.w, &b.w, 1e-8);
        let c = solve_sum_to_m(&loo, &y, 1.0).unwrap();
        assert_close(&a.w, &c.w, 1e-10);
    }

    #[test]
    fn u_matrix_index_convention() {
        // The transposed reading of U does not give the constrained optimum.
        let (loo, y) = random_instance(4, 30, 3);
        let mats = SolverMatrices::new(&loo, &y).unwrap();
        let oracle = kkt_oracle(&loo, &y, Some(0.7)).unwrap();
        let uw = mats.u(0.7) * &oracle.w;
        let spread = uw.max() - uw.min();
        assert!(spread < 1e-8 * uw.amax(), "U w not proportional to 1: {uw}");
        let ut_w = mats.u(0.7).transpose() * &oracle.w;
        assert!(ut_w.max() - ut_w.min() > 1e-3 * ut_w.amax());
    }

    #[test]
    fn u_at_m_one_is_negative_residual_gram() {
        let (loo, y) = random_instance(5, 20, 3);
        let mats = SolverMatrices::new(&loo, &y).unwrap();
        let diff = mats.u(1.0) + mats.residual_gram();
        assert!(diff.amax() < 1e-10 * mats.residual_gram().amax());
    }

    #[test]
    fn symmetric_orthogonal_pair() {
        let (loo, y) = symmetric_orthogonal_instance();
        let half = solve_sum_to_one(&loo, &y).unwrap();
        assert_close(&half.w, &DVector::from_vec(vec![0.5, 0.5]), 1e-12);
        let two = solve_sum_to_m(&loo, &y, 2.0).unwrap();
        assert_close(&two.w, &DVector::from_vec(vec![1.0, 1.0]), 1e-12);
    }

    #[test]
    fn single_model_sum_constraints() {
        let loo = LooMatrix::from_predictions(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(solve_sum_to_one(&loo, &y).unwrap().w[0], 1.0);
        assert_eq!(solve_sum_to_m(&loo, &y, -1.5).unwrap().w[0], -1.5);
    }

    #[test]
    fn non_binding_constraint_reproduces_unconstrained() {
        let (loo, y) = random_instance(6, 60, 4);
        let free = solve_unconstrained(&loo, &y).unwrap();
        let m_star = free.w.sum();
        let oracle = kkt_oracle(&loo, &y, Some(m_star)).unwrap();
        assert_close(&oracle.w, &free.w, 1e-10);
        let closed = solve_sum_to_m(&loo, &y, m_star).unwrap();
        assert_close(&closed.w, &free.w, 1e-8);
    }

    #[test]
    fn grid_search_confirms_oracle_minimum() {
        let preds = DMatrix::from_row_slice(5, 2, &[1.0, 0.2, 0.5, -1.0, -0.3, 0.8, 1.2, 0.1, 0.0, 1.0]);
        let y = DVector::from_vec(vec![1.1, -0.4, 0.9, 1.0, 0.7]);
        let loo = LooMatrix::from_predictions(preds).unwrap();

        let free = kkt_oracle(&loo, &y, None).unwrap();
        assert!(free.w.iter().all(|w| w.abs() < 3.0));
        let (mut lo, mut hi) = ([-3.0, -3.0], [3.0, 3.0]);
        let mut best = f64::INFINITY;
        for _ in 0..12 {
            let steps = 60;
            let mut arg = [0.0, 0.0];
            best = f64::INFINITY;
            for a in 0..=steps {
                for b in 0..=steps {
                    let w0 = lo[0] + (hi[0] - lo[0]) * a as f64 / steps as f64;
                    let w1 = lo[1] + (hi[1] - lo[1]) * b as f64 / steps as f64;
                    let q = stacking_error(&loo, &y, &DVector::from_vec(vec![w0, w1])).unwrap();
                    if q < best {
                        best = q;
                        arg = [w0, w1];
                    }
                }
            }
            for k in 0..2 {
                let half = (hi[k] - lo[k]) / 10.0;
                lo[k] = arg[k] - half;
                hi[k] = arg[k] + half;
            }
        }
        assert!(free.q <= best + 1e-12);
        assert!(best - free.q < 1e-9);

        // Constrained: search along the line w0 + w1 = 0.8.
        let m = 0.8;
        let con = kkt_oracle(&loo, &y, Some(m)).unwrap();
        let mut best_c = f64::INFINITY;
        for a in 0..=60_000 {
            let w0 = -3.0 + 6.0 * a as f64 / 60_000.0;
            let q = stacking_error(&loo, &y, &DVector::from_vec(vec![w0, m - w0])).unwrap();
            best_c = best_c.min(q);
        }
        assert!(con.q <= best_c + 1e-12);
        assert!(best_c - con.q < 1e-6);
    }

    #[test]
    fn error_paths() {
        let (loo, y) = random_instance(7, 10, 2);
        assert_eq!(solve_sum_to_m(&loo, &y, 0.0).unwrap_err(), Error::ZeroConstraint);
        let collinear = DMatrix::from_fn(10, 2, |i, _| i as f64);
        let loo = LooMatrix::from_predictions(collinear).unwrap();
        assert!(matches!(solve_unconstrained(&loo, &y), Err(Error::Singular { .. })));
        assert!(matches!(kkt_oracle(&loo, &y, None), Err(Error::Singular { .. })));
        let wide = LooMatrix::from_predictions(DMatrix::from_fn(2, 3, |i, j| (i + j) as f64)).unwrap();
        assert!(solve_unconstrained(&wide, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let (loo, y) = random_instance(8, 40, 3);
        let base = solve_unconstrained(&loo, &y).unwrap();
        let alpha = -3.5;
        let mut scaled = loo.preds().clone();
        scaled.column_mut(1).scale_mut(alpha);
        let s = solve_unconstrained(&LooMatrix::from_predictions(scaled).unwrap(), &y).unwrap();
        assert!((s.w[1] - base.w[1] / alpha).abs() < 1e-10);
        assert!((s.q - base.q).abs() <= 1e-10 * base.q.max(1.0));
    }

    #[test]
    fn unconstrained_beats_random_probes() {
        let (loo, y) = random_instance(9, 30, 3);
        let sol = solve_unconstrained(&loo, &y).unwrap();
        let mut rng = RngPlan::new(9).substream("probe", 0).rng();
        for _ in 0..200 {
            let w = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            assert!(sol.q <= stacking_error(&loo, &y, &w).unwrap());
        }
    }

    #[test]
    fn sum_to_one_not_span_invariant() {
        // J = 1 and the same predictor scaled by k: the constraint pins w = 1
        // in both cases, so the fits (and errors) differ.
        let yhat = [1.0, 2.0, 0.5, -1.0];
        let y = DVector::from_vec(vec![1.2, 1.8, 0.7, -0.8]);
        let k = 2.5;
        let a = LooMatrix::from_predictions(DMatrix::from_column_slice(4, 1, &yhat)).unwrap();
        let scaled: Vec<f64> = yhat.iter().map(|v| k * v).collect();
        let b = LooMatrix::from_predictions(DMatrix::from_column_slice(4, 1, &scaled)).unwrap();
        let qa = solve_sum_to_one(&a, &y).unwrap().q;
        let qb = solve_sum_to_one(&b, &y).unwrap().q;
        assert!((qa - qb).abs() > 1.0);
        // Unconstrained, the span is the same and so is the error.
        let ua = solve_unconstrained(&a, &y).unwrap().q;
        let ub = solve_unconstrained(&b, &y).unwrap().q;
        assert!((ua - ub).abs() < 1e-12);
    }
}
