//! Data-driven orthonormal bases.
//!
//! Candidates are nonparametric fits on bootstrap resamples. They are
//! orthonormalized under the empirical inner product (a batch with a
//! near-duplicate candidate is rejected and redrawn), ordered by how close
//! their arc length / surface area is to a full-data fit, and truncated at
//! the dimension minimizing either a permuted sequential-prediction error or
//! the leave-one-out error of the linear fit on the leading columns.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{default_bandwidth_grid, gp_fit, nw_fit, select_bandwidth_cv, KernelSpec};
use crate::loocv::{fit_linear, loo_linear, Fitter, Predictor};
use crate::rng::{RngPlan, BOOTSTRAP, PERMUTATION};
use crate::types::Dataset;

/// Relative residual norm below which a candidate counts as a duplicate.
pub const DEFAULT_REJECTION_TOL: f64 = 1e-6;
/// Grid points per axis for surface areas.
pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_MAX_ROUNDS: usize = 50;

const ORTHONORMAL_TOL: f64 = 1e-8;

/// How bootstrap candidates (and the full-data reference fit) are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Nadaraya-Watson, bandwidth chosen by leave-one-out on each resample.
    NadarayaWatson,
    GaussianProcess(KernelSpec),
}

impl Generator {
    /// Fits the generator's estimator to `data`.
    pub fn fit(&self, data: &Dataset) -> Result<crate::kernels::RegressionFn> {
        match self {
            Generator::NadarayaWatson => {
                let grid = default_bandwidth_grid(data);
                let lambda = select_bandwidth_cv(data, &grid)?;
                nw_fit(data, lambda)
            }
            Generator::GaussianProcess(spec) => gp_fit(data, spec),
        }
    }
}

/// One basis function: a linear combination of shared candidate functions.
pub struct BasisElement<'a> {
    candidates: &'a [Arc<dyn Predictor>],
    weights: Vec<f64>,
}

impl BasisElement<'_> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        combine(&self.weights, self.candidates.iter().map(|c| c.predict(x)))
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl std::fmt::Debug for BasisElement<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BasisElement").field("weights", &self.weights).finish()
    }
}

fn combine(weights: &[f64], values: impl Iterator<Item = f64>) -> f64 {
    weights.iter().zip(values).fold(0.0, |acc, (w, v)| acc + w * v)
}

/// `J` evaluable basis functions, their values at the design points, and
/// their empirical Gram matrix.
#[derive(Clone)]
pub struct BasisSet {
    candidates: Arc<Vec<Arc<dyn Predictor>>>,
    /// `combos[(k, j)]`: weight of candidate `k` in element `j`.
    combos: DMatrix<f64>,
    evals: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl std::fmt::Debug for BasisSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BasisSet")
            .field("candidates", &self.candidates.len())
            .field("combos", &self.combos)
            .field("gram", &self.gram)
            .finish()
    }
}

fn empirical_gram(evals: &DMatrix<f64>) -> DMatrix<f64> {
    evals.transpose() * evals / evals.nrows() as f64
}

impl BasisSet {
    /// Basis whose elements are `functions` themselves, evaluated on `data`.
    pub fn from_functions(functions: Vec<Arc<dyn Predictor>>, data: &Dataset) -> Result<Self> {
        let j = functions.len();
        if j == 0 {
            return Err(Error::invalid("basis needs at least one function"));
        }
        Self::assemble(Arc::new(functions), DMatrix::identity(j, j), data)
    }

    fn assemble(
        candidates: Arc<Vec<Arc<dyn Predictor>>>,
        combos: DMatrix<f64>,
        data: &Dataset,
    ) -> Result<Self> {
        let cand = candidate_evals(&candidates, data);
        Ok(Self::with_candidate_evals(candidates, combos, &cand))
    }

    fn with_candidate_evals(
        candidates: Arc<Vec<Arc<dyn Predictor>>>,
        combos: DMatrix<f64>,
        cand: &DMatrix<f64>,
    ) -> Self {
        let n = cand.nrows();
        let j = combos.ncols();
        // Same summation order as `BasisElement::eval`, so the stored
        // evaluations are exactly the elements at the design points.
        let evals = DMatrix::from_fn(n, j, |i, col| {
            combine(combos.column(col).as_slice(), cand.row(i).iter().copied())
        });
        let gram = empirical_gram(&evals);
        BasisSet {
            candidates,
            combos,
            evals,
            gram,
        }
    }

    pub fn len(&self) -> usize {
        self.combos.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evals(&self) -> &DMatrix<f64> {
        &self.evals
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn element(&self, j: usize) -> BasisElement<'_> {
        BasisElement {
            candidates: &self.candidates,
            weights: self.combos.column(j).iter().copied().collect(),
        }
    }

    /// Values of every element at `x`.
    pub fn eval_all(&self, x: &[f64]) -> Vec<f64> {
        let values: Vec<f64> = self.candidates.iter().map(|c| c.predict(x)).collect();
        (0..self.len())
            .map(|j| combine(self.combos.column(j).as_slice(), values.iter().copied()))
            .collect()
    }

    /// `max |gram - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (&self.gram - DMatrix::identity(self.len(), self.len())).amax()
    }

    /// Elements reordered so that new position `p` holds old element `order[p]`.
    pub fn permuted(&self, order: &[usize]) -> BasisSet {
        let combos = DMatrix::from_fn(self.combos.nrows(), order.len(), |k, p| self.combos[(k, order[p])]);
        let evals = DMatrix::from_fn(self.evals.nrows(), order.len(), |i, p| self.evals[(i, order[p])]);
        let gram = DMatrix::from_fn(order.len(), order.len(), |a, b| self.gram[(order[a], order[b])]);
        BasisSet {
            candidates: self.candidates.clone(),
            combos,
            evals,
            gram,
        }
    }

    /// The first `j` elements.
    pub fn truncated(&self, j: usize) -> BasisSet {
        let order: Vec<usize> = (0..j.min(self.len())).collect();
        self.permuted(&order)
    }
}

fn candidate_evals(candidates: &[Arc<dyn Predictor>], data: &Dataset) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = candidates
        .par_iter()
        .map(|c| (0..data.n()).map(|i| c.predict(data.point(i))).collect())
        .collect();
    DMatrix::from_fn(data.n(), candidates.len(), |i, k| cols[k][i])
}

/// Fits one regressor per bootstrap resample of `data`.
///
/// Candidate `c` draws from the substream `(bootstrap, c)`; a failed fit moves
/// on to the next attempt within that substream. More than `10 J` failures in
/// total is an error.
pub fn bootstrap_candidates(
    data: &Dataset,
    j: usize,
    generator: &Generator,
    plan: &RngPlan,
) -> Result<Vec<crate::kernels::RegressionFn>> {
    if j == 0 {
        return Err(Error::invalid("need at least one candidate"));
    }
    if data.n() < 2 {
        return Err(Error::invalid("bootstrap needs at least two observations"));
    }
    let budget = 10 * j;
    let n = data.n();
    let results: Vec<(Result<crate::kernels::RegressionFn>, usize)> = (0..j)
        .into_par_iter()
        .map(|c| {
            let stream = plan.substream(BOOTSTRAP, c as u64);
            let mut failures = 0;
            let mut last = String::new();
            while failures <= budget {
                let mut rng = stream.substream("attempt", failures as u64).rng();
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                match generator.fit(&data.subset(&idx)) {
                    Ok(f) => return (Ok(f), failures),
                    Err(e) => {
                        last = e.to_string();
                        failures += 1;
                    }
                }
            }
            (
                Err(Error::GeneratorExhausted {
                    attempts: failures,
                    last,
                }),
                failures,
            )
        })
        .collect();
    let total: usize = results.iter().map(|(_, f)| f).sum();
    let mut out = Vec::with_capacity(j);
    let mut last_err = None;
    for (r, _) in results {
        match r {
            Ok(f) => out.push(f),
            Err(e) => last_err = Some(e),
        }
    }
    if let Some(e) = last_err {
        return Err(e);
    }
    if total > budget {
        return Err(Error::GeneratorExhausted {
            attempts: total,
            last: "retry budget exceeded".into(),
        });
    }
    Ok(out)
}

/// Result of orthonormalizing a batch of candidate evaluations.
#[derive(Debug, Clone, PartialEq)]
pub enum GramSchmidt {
    Accepted(Orthonormalized),
    /// Candidate `column` is (numerically) in the span of earlier ones.
    Rejected { column: usize, ratio: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthonormalized {
    /// Orthonormal columns, `evals = candidates * coeffs`.
    pub evals: DMatrix<f64>,
    /// Upper-triangular change of basis.
    pub coeffs: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

/// Modified Gram-Schmidt (two passes) under `<g, h>_n = (1/n) sum g_i h_i`.
///
/// A candidate whose residual after projection is below `tol` times its own
/// norm rejects the whole batch. A zero column is an error.
pub fn gram_schmidt_empirical(candidates: &DMatrix<f64>, tol: f64) -> Result<GramSchmidt> {
    let (n, j) = candidates.shape();
    if j == 0 {
        return Err(Error::invalid("no candidate columns"));
    }
    if n < j {
        return Err(Error::invalid(format!(
            "need at least as many design points as candidates, got n={n}, J={j}"
        )));
    }
    let ip = |a: &DVector<f64>, b: &DVector<f64>| a.dot(b) / n as f64;
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(j);
    let mut coeffs = DMatrix::zeros(j, j);
    for k in 0..j {
        let original: DVector<f64> = candidates.column(k).into_owned();
        let norm0 = ip(&original, &original).sqrt();
        if norm0 == 0.0 || !norm0.is_finite() {
            return Err(Error::ZeroNormColumn { column: k });
        }
        let mut v = original;
        let mut c = DVector::zeros(j);
        c[k] = 1.0;
        for _pass in 0..2 {
            for (prev, qv) in q.iter().enumerate() {
                let r = ip(qv, &v);
                v.axpy(-r, qv, 1.0);
                let col = coeffs.column(prev).into_owned();
                c.axpy(-r, &col, 1.0);
            }
        }
        let norm = ip(&v, &v).sqrt();
        if norm < tol * norm0 {
            return Ok(GramSchmidt::Rejected {
                column: k,
                ratio: norm / norm0,
            });
        }
        coeffs.set_column(k, &(c / norm));
        q.push(v / norm);
    }
    // Recompute from the coefficients and correct any residual drift.
    let mut evals = candidates * &coeffs;
    for _ in 0..3 {
        let gram = empirical_gram(&evals);
        if (&gram - DMatrix::identity(j, j)).amax() <= 1e-12 {
            break;
        }
        let Some(chol) = gram.cholesky() else { break };
        let l_t_inv = chol
            .l()
            .transpose()
            .try_inverse()
            .ok_or(Error::Singular {
                what: "empirical Gram matrix",
                rcond: 0.0,
            })?;
        coeffs = &coeffs * l_t_inv;
        evals = candidates * &coeffs;
    }
    let gram = empirical_gram(&evals);
    Ok(GramSchmidt::Accepted(Orthonormalized { evals, coeffs, gram }))
}

/// Bootstrap, orthonormalize, and redraw on rejection, up to `max_rounds`.
pub fn generate_orthonormal_basis(
    data: &Dataset,
    j: usize,
    generator: &Generator,
    plan: &RngPlan,
    max_rounds: usize,
) -> Result<BasisSet> {
    if max_rounds == 0 {
        return Err(Error::invalid("max_rounds must be at least 1"));
    }
    if j == 0 || j > data.n() {
        return Err(Error::invalid(format!(
            "basis size must be between 1 and n={}, got {j}",
            data.n()
        )));
    }
    let mut last = String::new();
    for round in 0..max_rounds {
        let fits = bootstrap_candidates(data, j, generator, &plan.substream("round", round as u64))?;
        let candidates: Arc<Vec<Arc<dyn Predictor>>> =
            Arc::new(fits.into_iter().map(|f| Arc::new(f) as Arc<dyn Predictor>).collect());
        let cand = candidate_evals(&candidates, data);
        if let Some(column) = (0..j).find(|&k| cand.column(k).iter().all(|v| *v == 0.0)) {
            last = format!("round {round}: candidate {column} is identically zero");
            continue;
        }
        match gram_schmidt_empirical(&cand, DEFAULT_REJECTION_TOL)? {
            GramSchmidt::Accepted(orth) => {
                let basis = BasisSet::with_candidate_evals(candidates, orth.coeffs, &cand);
                if basis.orthonormality_error() <= ORTHONORMAL_TOL {
                    return Ok(basis);
                }
                last = format!(
                    "round {round}: orthonormality error {:.3e}",
                    basis.orthonormality_error()
                );
            }
            GramSchmidt::Rejected { column, ratio } => {
                last = format!("round {round}: candidate {column} residual ratio {ratio:.3e}");
            }
        }
    }
    Err(Error::BasisRoundsExceeded {
        rounds: max_rounds,
        last,
    })
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("box bounds must have equal, nonzero length"));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid("box lower bounds must not exceed upper bounds"));
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn of(data: &Dataset) -> Self {
        let (lower, upper) = data.bounding_box();
        BoxDomain { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn grid_points(&self, resolution: usize) -> Vec<Vec<f64>> {
        let axis = |k: usize, t: usize| {
            self.lower[k] + (self.upper[k] - self.lower[k]) * t as f64 / (resolution - 1) as f64
        };
        match self.dim() {
            1 => (0..resolution).map(|t| vec![axis(0, t)]).collect(),
            _ => (0..resolution)
                .flat_map(|a| (0..resolution).map(move |b| (a, b)))
                .map(|(a, b)| vec![axis(0, a), axis(1, b)])
                .collect(),
        }
    }
}

fn check_area_args(domain: &BoxDomain, resolution: usize) -> Result<()> {
    if domain.dim() > 2 {
        return Err(Error::UnsupportedDimension(domain.dim()));
    }
    if resolution < 2 {
        return Err(Error::invalid("surface-area resolution must be at least 2"));
    }
    Ok(())
}

/// Arc length (1-D) or triangulated surface area (2-D) from values on the
/// uniform grid of `domain` (row-major over the first axis in 2-D).
fn area_from_grid(values: &[f64], domain: &BoxDomain, resolution: usize) -> f64 {
    let step = |k: usize| (domain.upper[k] - domain.lower[k]) / (resolution - 1) as f64;
    if domain.dim() == 1 {
        let h = step(0);
        return values.windows(2).map(|w| h.hypot(w[1] - w[0])).sum();
    }
    let (hx, hy) = (step(0), step(1));
    let at = |a: usize, b: usize| values[a * resolution + b];
    let tri = |p: [f64; 3], q: [f64; 3], r: [f64; 3]| {
        let u = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        let v = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
        let cx = u[1] * v[2] - u[2] * v[1];
        let cy = u[2] * v[0] - u[0] * v[2];
        let cz = u[0] * v[1] - u[1] * v[0];
        0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
    };
    let mut total = 0.0;
    for a in 0..resolution - 1 {
        for b in 0..resolution - 1 {
            let p00 = [0.0, 0.0, at(a, b)];
            let p10 = [hx, 0.0, at(a + 1, b)];
            let p11 = [hx, hy, at(a + 1, b + 1)];
            let p01 = [0.0, hy, at(a, b + 1)];
            total += tri(p00, p10, p11) + tri(p00, p11, p01);
        }
    }
    total
}

/// Arc length (1-D) or surface area (2-D) of the graph of `f` over `domain`,
/// sampled on a uniform grid with `resolution` points per axis.
pub fn surface_area(f: &dyn Predictor, domain: &BoxDomain, resolution: usize) -> Result<f64> {
    check_area_args(domain, resolution)?;
    let values: Vec<f64> = domain.grid_points(resolution).iter().map(|x| f.predict(x)).collect();
    Ok(area_from_grid(&values, domain, resolution))
}

/// Sorts elements by `|SA(reference) - SA(e_j)|`, ascending and stable.
///
/// Inputs with three or more coordinates keep their order (with a warning),
/// since areas are only defined up to two dimensions.
pub fn order_basis(
    basis: &BasisSet,
    reference: &dyn Predictor,
    domain: &BoxDomain,
    resolution: usize,
) -> Result<BasisSet> {
    if domain.dim() > 2 {
        log::warn!(
            "surface-area ordering is undefined for {}-dimensional inputs; keeping the original order",
            domain.dim()
        );
        return Ok(basis.clone());
    }
    check_area_args(domain, resolution)?;
    let points = domain.grid_points(resolution);
    let reference_area = {
        let values: Vec<f64> = points.iter().map(|x| reference.predict(x)).collect();
        area_from_grid(&values, domain, resolution)
    };
    let cand_values: Vec<Vec<f64>> = basis
        .candidates
        .par_iter()
        .map(|c| points.iter().map(|x| c.predict(x)).collect())
        .collect();
    let gaps: Vec<f64> = (0..basis.len())
        .map(|j| {
            let weights = basis.combos.column(j);
            let values: Vec<f64> = (0..points.len())
                .map(|t| combine(weights.as_slice(), cand_values.iter().map(|cv| cv[t])))
                .collect();
            (reference_area - area_from_grid(&values, domain, resolution)).abs()
        })
        .collect();
    let mut order: Vec<usize> = (0..basis.len()).collect();
    order.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]));
    Ok(basis.permuted(&order))
}

/// `K` permutations of the observations and the first predicted position.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    sigmas: Vec<Vec<usize>>,
    burn_in: usize,
}

impl PermutationPlan {
    /// `k` independent uniform permutations of `0..n`.
    pub fn random(n: usize, k: usize, burn_in: usize, plan: &RngPlan) -> Result<Self> {
        let sigmas = (0..k)
            .map(|s| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut plan.substream(PERMUTATION, s as u64).rng());
                p
            })
            .collect();
        Self::new(sigmas, burn_in)
    }

    pub fn new(sigmas: Vec<Vec<usize>>, burn_in: usize) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::invalid("need at least one permutation"));
        }
        if burn_in < 2 {
            return Err(Error::invalid("burn-in must be at least 2"));
        }
        for s in &sigmas {
            let mut seen = vec![false; s.len()];
            for &i in s {
                if i >= s.len() || seen[i] {
                    return Err(Error::invalid("permutation is not a bijection"));
                }
                seen[i] = true;
            }
        }
        Ok(PermutationPlan { sigmas, burn_in })
    }

    pub fn sigmas(&self) -> &[Vec<usize>] {
        &self.sigmas
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }
}

/// The estimator refitted on each sequential prefix.
#[derive(Clone, Copy)]
pub enum Smoother<'a> {
    /// Nadaraya-Watson with a fixed bandwidth on univariate inputs, updated
    /// incrementally as the prefix grows.
    NadarayaWatson { bandwidth: f64 },
    /// Any fitter, refitted from scratch on every prefix.
    Refit(&'a dyn Fitter),
}

/// Running log-sum-exp accumulator for the incremental NW prefix fit.
#[derive(Clone, Copy)]
struct Stream {
    top: f64,
    num: f64,
    den: f64,
}

impl Stream {
    const EMPTY: Stream = Stream {
        top: f64::NEG_INFINITY,
        num: 0.0,
        den: 0.0,
    };

    fn push(&mut self, expo: f64, y: f64) {
        if expo > self.top {
            let s = (self.top - expo).exp();
            self.num = self.num * s + y;
            self.den = self.den * s + 1.0;
            self.top = expo;
        } else {
            let k = (expo - self.top).exp();
            self.num += k * y;
            self.den += k;
        }
    }
}

/// Sequential-prediction error for every truncation `J' = 1..J`.
///
/// For each permutation and each position `i >= burn_in` (1-based), the
/// smoother is fitted to the points before position `i`; its coefficients on
/// the basis are empirical inner products over all `n` design points; the
/// squared error of the `J'`-term expansion at the point in position `i` is
/// accumulated.
pub fn sequential_scores(
    data: &Dataset,
    basis: &BasisSet,
    plan: &PermutationPlan,
    smoother: Smoother<'_>,
) -> Result<Vec<f64>> {
    let n = data.n();
    let j = basis.len();
    if basis.evals().nrows() != n {
        return Err(Error::DimensionMismatch {
            axis: "basis evaluations vs observations",
            expected: n,
            found: basis.evals().nrows(),
        });
    }
    if plan.sigmas.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("permutation length differs from the number of observations"));
    }
    let evals = basis.evals();
    let per_sigma: Vec<Result<Vec<f64>>> = plan
        .sigmas
        .par_iter()
        .map(|sigma| {
            let mut totals = vec![0.0; j];
            let mut accumulate = |fvals: &[f64], target: usize| {
                let mut pred = 0.0;
                for col in 0..j {
                    let coef = evals.column(col).iter().zip(fvals).map(|(e, f)| e * f).sum::<f64>() / n as f64;
                    pred += coef * evals[(target, col)];
                    totals[col] += (data.y()[target] - pred).powi(2);
                }
            };
            match smoother {
                Smoother::NadarayaWatson { bandwidth } if data.dim() == 1 => {
                    if !(bandwidth > 0.0) {
                        return Err(Error::invalid("bandwidth must be positive"));
                    }
                    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
                    let x: Vec<f64> = data.points().to_vec();
                    let mut streams = vec![Stream::EMPTY; n];
                    let mut fvals = vec![0.0; n];
                    for pos in 0..n {
                        if pos + 1 >= plan.burn_in {
                            for (f, s) in fvals.iter_mut().zip(&streams) {
                                *f = s.num / s.den;
                            }
                            accumulate(&fvals, sigma[pos]);
                        }
                        let (xa, ya) = (x[sigma[pos]], data.y()[sigma[pos]]);
                        for (t, s) in streams.iter_mut().enumerate() {
                            s.push(-(x[t] - xa).powi(2) * inv, ya);
                        }
                    }
                }
                Smoother::NadarayaWatson { bandwidth } => {
                    let fitter = crate::kernels::NwFitter { bandwidth };
                    refit_prefixes(data, sigma, plan.burn_in, &fitter, &mut accumulate)?;
                }
                Smoother::Refit(fitter) => {
                    refit_prefixes(data, sigma, plan.burn_in, fitter, &mut accumulate)?;
                }
            }
            Ok(totals)
        })
        .collect();
    let mut scores = vec![0.0; j];
    for r in per_sigma {
        for (s, t) in scores.iter_mut().zip(r?) {
            *s += t;
        }
    }
    Ok(scores)
}

fn refit_prefixes(
    data: &Dataset,
    sigma: &[usize],
    burn_in: usize,
    fitter: &dyn Fitter,
    accumulate: &mut dyn FnMut(&[f64], usize),
) -> Result<()> {
    for pos in (burn_in - 1)..data.n() {
        let model = fitter.fit(&data.subset(&sigma[..pos]))?;
        let fvals: Vec<f64> = (0..data.n()).map(|t| model.predict(data.point(t))).collect();
        accumulate(&fvals, sigma[pos]);
    }
    Ok(())
}

/// Sequential-prediction error of the first `j_prime` basis elements.
pub fn sequential_score(
    data: &Dataset,
    basis: &BasisSet,
    j_prime: usize,
    plan: &PermutationPlan,
    smoother: Smoother<'_>,
) -> Result<f64> {
    if j_prime == 0 || j_prime > basis.len() {
        return Err(Error::invalid(format!(
            "truncation must be between 1 and {}, got {j_prime}",
            basis.len()
        )));
    }
    Ok(sequential_scores(data, &basis.truncated(j_prime), plan, smoother)?[j_prime - 1])
}

/// Leave-one-out error of the least-squares fit on the first `J'` columns,
/// for every `J'`.
pub fn cv_scores(data: &Dataset, basis: &BasisSet) -> Result<Vec<f64>> {
    let y = data.y_vector();
    (1..=basis.len())
        .map(|jp| {
            let design = basis.evals().columns(0, jp).into_owned();
            let fit = fit_linear(&design, &y)?;
            let loo = loo_linear(&fit, &y)?;
            Ok((&y - loo).norm_squared())
        })
        .collect()
}

/// Criterion used to pick the basis dimension.
#[derive(Clone, Copy)]
pub enum SelectMode<'a> {
    Sequential {
        plan: &'a PermutationPlan,
        smoother: Smoother<'a>,
    },
    Cv,
}

#[derive(Debug, Clone)]
pub struct BasisSearchResult {
    pub j_opt: usize,
    /// The full ordered basis; its first `j_opt` elements are selected.
    pub basis_opt: BasisSet,
    /// Score of each truncation `J' = 1..J`.
    pub scores: Vec<f64>,
}

impl BasisSearchResult {
    pub fn best_score(&self) -> f64 {
        self.scores[self.j_opt - 1]
    }
}

/// Scores every truncation and returns the minimizer (ties to the smaller `J'`).
pub fn select_j_opt(data: &Dataset, basis: &BasisSet, mode: SelectMode<'_>) -> Result<BasisSearchResult> {
    let scores = match mode {
        SelectMode::Sequential { plan, smoother } => sequential_scores(data, basis, plan, smoother)?,
        SelectMode::Cv => cv_scores(data, basis)?,
    };
    let mut j_opt = 1;
    for (idx, s) in scores.iter().enumerate() {
        if *s < scores[j_opt - 1] {
            j_opt = idx + 1;
        }
    }
    Ok(BasisSearchResult {
        j_opt,
        basis_opt: basis.clone(),
        scores,
    })
}

/// Dimension-selection criterion for [`search_basis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectKind {
    Sequential,
    Cv,
}

/// Settings of the stochastic basis search.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSearchConfig {
    pub j: usize,
    pub generator: Generator,
    pub restarts: usize,
    pub max_rounds: usize,
    pub select: SelectKind,
    pub permutations: usize,
    pub burn_in: usize,
    pub resolution: usize,
}

impl BasisSearchConfig {
    pub fn new(j: usize, generator: Generator) -> Self {
        BasisSearchConfig {
            j,
            generator,
            restarts: 5,
            max_rounds: DEFAULT_MAX_ROUNDS,
            select: SelectKind::Cv,
            permutations: 5,
            burn_in: 2,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

/// Independent restarts of generate, order and select; the lowest score wins
/// (ties to the earlier restart).
///
/// The reference fit for ordering and the sequential smoother both use the
/// generator's estimator on all of `data`. Every restart is scored on the same
/// permutations.
pub fn search_basis(data: &Dataset, config: &BasisSearchConfig, plan: &RngPlan) -> Result<BasisSearchResult> {
    if config.restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }
    let reference = config.generator.fit(data)?;
    let domain = BoxDomain::of(data);
    let perms = PermutationPlan::random(data.n(), config.permutations.max(1), config.burn_in, plan)?;
    let gp_fitter;
    let smoother = match (&config.generator, &reference) {
        (Generator::NadarayaWatson, crate::kernels::RegressionFn::NadarayaWatson(fit)) => {
            Smoother::NadarayaWatson {
                bandwidth: fit.bandwidth(),
            }
        }
        (Generator::GaussianProcess(spec), _) => {
            gp_fitter = crate::kernels::GpFitter { spec: *spec };
            Smoother::Refit(&gp_fitter)
        }
        _ => unreachable!("reference fit matches the generator"),
    };
    let runs: Vec<Result<BasisSearchResult>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let basis = generate_orthonormal_basis(
                data,
                config.j,
                &config.generator,
                &plan.substream("restart", r as u64),
                config.max_rounds,
            )?;
            let ordered = order_basis(&basis, &reference, &domain, config.resolution)?;
            let mode = match config.select {
                SelectKind::Cv => SelectMode::Cv,
                SelectKind::Sequential => SelectMode::Sequential {
                    plan: &perms,
                    smoother,
                },
            };
            select_j_opt(data, &ordered, mode)
        })
        .collect();
    let mut best: Option<BasisSearchResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.best_score() < b.best_score()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
