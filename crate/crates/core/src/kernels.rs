//! Nonparametric regression estimators: Nadaraya-Watson with a Gaussian
//! kernel and Gaussian-process posterior means.
//!
//! Inputs with two or more coordinates are standardized by the training mean
//! and standard deviation before the (isotropic) kernel is applied.
//! Univariate inputs are used as given.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loocv::{Fitter, Predictor};
use crate::types::Dataset;

/// Per-coordinate affine map applied before kernel evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaler {
    fn fit(data: &Dataset) -> Self {
        let d = data.dim();
        let n = data.n();
        if d < 2 || n == 0 {
            return Scaler {
                center: vec![0.0; d],
                scale: vec![1.0; d],
            };
        }
        let mut center = vec![0.0; d];
        for i in 0..n {
            for (c, v) in center.iter_mut().zip(data.point(i)) {
                *c += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                scale[k] += (data.point(i)[k] - center[k]).powi(2);
            }
        }
        for s in &mut scale {
            *s = (*s / n as f64).sqrt();
            if !(*s > 0.0) {
                *s = 1.0;
            }
        }
        Scaler { center, scale }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(self.center.iter().zip(&self.scale))
                .map(|(v, (c, s))| (v - c) / s),
        );
    }

    fn transform(&self, data: &Dataset) -> Vec<f64> {
        let mut all = Vec::with_capacity(data.points().len());
        let mut buf = Vec::new();
        for i in 0..data.n() {
            self.apply(data.point(i), &mut buf);
            all.extend_from_slice(&buf);
        }
        all
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fitted Nadaraya-Watson estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NwFit {
    points: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
    bandwidth: f64,
    scaler: Scaler,
}

impl NwFit {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `sum_i K((x - x_i)/lambda) y_i / sum_i K((x - x_i)/lambda)` with
    /// `K(u) = exp(-|u|^2 / 2)`.
    ///
    /// Exponents are shifted by their maximum before exponentiating, so the
    /// denominator never underflows; far from every anchor the estimate tends
    /// to the response of the nearest anchor.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut xs = Vec::with_capacity(self.dim);
        self.scaler.apply(x, &mut xs);
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let n = self.y.len();
        let mut best = f64::NEG_INFINITY;
        let mut expo = Vec::with_capacity(n);
        for i in 0..n {
            let e = -sq_dist(&xs, &self.points[i * self.dim..(i + 1) * self.dim]) * inv;
            best = best.max(e);
            expo.push(e);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (e, y) in expo.iter().zip(&self.y) {
            let k = (e - best).exp();
            num += k * y;
            den += k;
        }
        num / den
    }
}

/// Fits the Nadaraya-Watson estimator with bandwidth `bandwidth`.
pub fn nw_fit(data: &Dataset, bandwidth: f64) -> Result<RegressionFn> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if data.n() == 0 {
        return Err(Error::invalid("Nadaraya-Watson needs at least one anchor"));
    }
    let scaler = Scaler::fit(data);
    Ok(RegressionFn::NadarayaWatson(NwFit {
        points: scaler.transform(data),
        y: data.y().to_vec(),
        dim: data.dim(),
        bandwidth,
        scaler,
    }))
}

/// Distinct observations with their multiplicities, in scaled coordinates.
struct Grouped {
    points: Vec<f64>,
    y: Vec<f64>,
    count: Vec<f64>,
    dim: usize,
}

fn group_rows(data: &Dataset) -> Grouped {
    let scaler = Scaler::fit(data);
    let scaled = scaler.transform(data);
    let d = data.dim();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut g = Grouped {
        points: Vec::new(),
        y: Vec::new(),
        count: Vec::new(),
        dim: d,
    };
    for i in 0..data.n() {
        let mut key: Vec<u64> = data.point(i).iter().map(|v| v.to_bits()).collect();
        key.push(data.y()[i].to_bits());
        match index.get(&key) {
            Some(&slot) => g.count[slot] += 1.0,
            None => {
                index.insert(key, g.y.len());
                g.points.extend_from_slice(&scaled[i * d..(i + 1) * d]);
                g.y.push(data.y()[i]);
                g.count.push(1.0);
            }
        }
    }
    g
}

impl Grouped {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn distances(&self) -> Vec<f64> {
        let m = self.len();
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in (a + 1)..m {
                let d = sq_dist(self.point(a), self.point(b));
                out[a * m + b] = d;
                out[b * m + a] = d;
            }
        }
        out
    }
}

/// Median distance between distinct anchors (in kernel coordinates).
pub fn median_pairwise_distance(data: &Dataset) -> f64 {
    let g = group_rows(data);
    let m = g.len();
    let mut d: Vec<f64> = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for a in 0..m {
        for b in (a + 1)..m {
            let v = sq_dist(g.point(a), g.point(b)).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *median
}

/// `count` log-spaced bandwidths over `[lo, hi] * scale`.
pub fn log_grid(lo: f64, hi: f64, count: usize, scale: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lo * scale];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp() * scale)
        .collect()
}

/// 25 log-spaced bandwidths over `[0.01, 10]` times the median pairwise
/// anchor distance.
pub fn default_bandwidth_grid(data: &Dataset) -> Vec<f64> {
    log_grid(0.01, 10.0, 25, median_pairwise_distance(data))
}

/// Bandwidth minimizing the leave-one-out squared error of [`nw_fit`].
///
/// Only row `i` itself leaves the anchor set when `x_i` is predicted; other
/// copies of a repeated row stay. Identical rows are evaluated once and
/// weighted by their multiplicity. A bandwidth whose leave-one-out prediction
/// is undefined anywhere is skipped. Ties go to the larger bandwidth.
pub fn select_bandwidth_cv(data: &Dataset, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("bandwidth grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bad}")));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    if data.n() < 2 {
        return Err(Error::NoValidBandwidth);
    }
    let g = group_rows(data);
    let m = g.len();
    let dist = g.distances();
    let mut best: Option<(f64, f64)> = None;
    let mut expo = vec![0.0; m];
    for &lambda in grid {
        let inv = 1.0 / (2.0 * lambda * lambda);
        let mut err = 0.0;
        for a in 0..m {
            let row = &dist[a * m..(a + 1) * m];
            let mut top = f64::NEG_INFINITY;
            for b in 0..m {
                if b != a || g.count[a] > 1.0 {
                    expo[b] = -row[b] * inv;
                    top = top.max(expo[b]);
                }
            }
            let (mut num, mut den) = (0.0, 0.0);
            for b in 0..m {
                let weight = if b == a { g.count[a] - 1.0 } else { g.count[b] };
                if weight > 0.0 {
                    let k = weight * (expo[b] - top).exp();
                    num += k * g.y[b];
                    den += k;
                }
            }
            err += g.count[a] * (g.y[a] - num / den).powi(2);
        }
        if !err.is_finite() {
            continue;
        }
        best = match best {
            Some((e, l)) if e < err || (e == err && l > lambda) => Some((e, l)),
            _ => Some((err, lambda)),
        };
    }
    best.map(|(_, l)| l).ok_or(Error::NoValidBandwidth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    /// `exp(-|x - x'|^2 / (2 l^2))`.
    Rbf { lengthscale: f64 },
    /// `(x . x' + offset)^degree`.
    Polynomial { degree: u32, offset: f64 },
}

/// Covariance family plus observation-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub noise: f64,
}

/// Smallest admissible noise variance.
pub const NOISE_FLOOR: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-6;

impl KernelSpec {
    /// Validates the parameters; noise below [`NOISE_FLOOR`] is raised to it.
    pub fn new(family: KernelFamily, noise: f64) -> Result<Self> {
        match family {
            KernelFamily::Rbf { lengthscale } if !(lengthscale > 0.0) || !lengthscale.is_finite() => {
                return Err(Error::invalid(format!("lengthscale must be positive, got {lengthscale}")))
            }
            KernelFamily::Polynomial { degree: 0, .. } => {
                return Err(Error::invalid("polynomial kernel degree must be at least 1"))
            }
            KernelFamily::Polynomial { offset, .. } if !offset.is_finite() => {
                return Err(Error::invalid("polynomial kernel offset must be finite"))
            }
            _ => {}
        }
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::invalid(format!("noise variance must be nonnegative, got {noise}")));
        }
        Ok(KernelSpec {
            family,
            noise: noise.max(NOISE_FLOOR),
        })
    }

    pub fn rbf(lengthscale: f64, noise: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf { lengthscale }, noise)
    }

    /// Parses `rbf:<lengthscale>` or `poly:<degree>,<offset>`.
    pub fn parse(kernel: &str, noise: f64) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse kernel '{kernel}'"));
        let (name, args) = kernel.split_once(':').ok_or_else(bad)?;
        let family = match name {
            "rbf" => KernelFamily::Rbf {
                lengthscale: args.trim().parse().map_err(|_| bad())?,
            },
            "poly" => {
                let (d, o) = args.split_once(',').ok_or_else(bad)?;
                KernelFamily::Polynomial {
                    degree: d.trim().parse().map_err(|_| bad())?,
                    offset: o.trim().parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        Self::new(family, noise)
    }

    pub fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf { lengthscale } => {
                (-sq_dist(a, b) / (2.0 * lengthscale * lengthscale)).exp()
            }
            KernelFamily::Polynomial { degree, offset } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (dot + offset).powi(degree as i32)
            }
        }
    }
}

/// Fitted Gaussian-process posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GpFit {
    points: Vec<f64>,
    alpha: Vec<f64>,
    dim: usize,
    spec: KernelSpec,
    scaler: Scaler,
}

impl GpFit {
    /// `k(x)' (K + noise I)^{-1} y`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut xs = Vec::with_capacity(self.dim);
        self.scaler.apply(x, &mut xs);
        self.alpha
            .iter()
            .enumerate()
            .map(|(i, a)| a * self.spec.covariance(&xs, &self.points[i * self.dim..(i + 1) * self.dim]))
            .sum()
    }
}

/// GP regression with a zero prior mean and fixed hyperparameters.
///
/// If `K + noise I` fails to factor, diagonal jitter is added in decades from
/// `1e-10` up to `1e-6` before giving up.
pub fn gp_fit(data: &Dataset, spec: &KernelSpec) -> Result<RegressionFn> {
    let n = data.n();
    if n == 0 {
        return Err(Error::invalid("Gaussian process needs at least one anchor"));
    }
    let scaler = Scaler::fit(data);
    let points = scaler.transform(data);
    let d = data.dim();
    let base = DMatrix::from_fn(n, n, |i, j| {
        spec.covariance(&points[i * d..(i + 1) * d], &points[j * d..(j + 1) * d])
    });
    let y = data.y_vector();
    let mut jitter = 0.0;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += spec.noise + jitter;
        }
        if let Some(chol) = k.cholesky() {
            let alpha = chol.solve(&y);
            return Ok(RegressionFn::GaussianProcess(GpFit {
                points,
                alpha: alpha.iter().copied().collect(),
                dim: d,
                spec: *spec,
                scaler,
            }));
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER * 1.0001 {
            return Err(Error::NotPositiveDefinite { jitter: MAX_JITTER });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    NadarayaWatson,
    GaussianProcess,
}

/// A fitted nonparametric regression function.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressionFn {
    NadarayaWatson(NwFit),
    GaussianProcess(GpFit),
}

impl RegressionFn {
    pub fn kind(&self) -> RegressionKind {
        match self {
            RegressionFn::NadarayaWatson(_) => RegressionKind::NadarayaWatson,
            RegressionFn::GaussianProcess(_) => RegressionKind::GaussianProcess,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            RegressionFn::NadarayaWatson(f) => f.eval(x),
            RegressionFn::GaussianProcess(f) => f.eval(x),
        }
    }

    /// Evaluates at every design point of `data`.
    pub fn eval_at(&self, data: &Dataset) -> DVector<f64> {
        DVector::from_fn(data.n(), |i, _| self.eval(data.point(i)))
    }
}

impl Predictor for RegressionFn {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

/// Nadaraya-Watson with a fixed bandwidth, as a [`Fitter`].
#[derive(Debug, Clone, Copy)]
pub struct NwFitter {
    pub bandwidth: f64,
}

impl Fitter for NwFitter {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(nw_fit(data, self.bandwidth)?))
    }
}

/// GP posterior mean with fixed hyperparameters, as a [`Fitter`].
#[derive(Debug, Clone, Copy)]
pub struct GpFitter {
    pub spec: KernelSpec,
}

impl Fitter for GpFitter {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(gp_fit(data, &self.spec)?))
    }
}
