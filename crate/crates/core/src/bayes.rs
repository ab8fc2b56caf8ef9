//! Conjugate Gaussian component models and a simulator comparing the
//! posterior risk of a stacked action with its leave-one-out risk.
//!
//! Every risk is "smaller is better"; the log-utility risk is the negative
//! expected log score.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::loocv::{fit_linear, loo_linear};
use crate::rng::{RngPlan, SIMULATION};
use crate::types::Dataset;

/// Absolute tolerance of the log-utility quadrature.
pub const QUADRATURE_TOL: f64 = 1e-8;
const MAX_SUBINTERVALS: usize = 20_000;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn log_normal_pdf(t: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (t - mean) * (t - mean) / (2.0 * var)
}

/// `y = phi(x)' beta + N(0, sigma2)` with prior `beta ~ N(0, tau2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLinearModel {
    pub features: FeatureMap,
    pub tau2: f64,
    pub sigma2: f64,
}

/// Posterior of the coefficients given a dataset.
#[derive(Debug, Clone)]
pub struct Posterior {
    model: GaussianLinearModel,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Posterior {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Predictive mean and variance at `x`.
    pub fn predictive(&self, x: &[f64]) -> (f64, f64) {
        let phi = DVector::from_vec(self.model.features.eval(x));
        let mu = phi.dot(&self.mean);
        let v = self.chol.solve(&phi);
        (mu, self.model.sigma2 + phi.dot(&v))
    }
}

fn cholesky_jittered(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let p = a.nrows();
    let scale = (a.trace() / p as f64).abs().max(1.0);
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let shifted = &a + DMatrix::identity(p, p) * (jitter * scale);
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: 1e-6 })
}

impl GaussianLinearModel {
    pub fn new(features: FeatureMap, tau2: f64, sigma2: f64) -> Result<Self> {
        if !(tau2 > 0.0) || !(sigma2 > 0.0) || !tau2.is_finite() || !sigma2.is_finite() {
            return Err(Error::invalid(format!(
                "prior and noise variances must be positive, got tau2={tau2}, sigma2={sigma2}"
            )));
        }
        Ok(GaussianLinearModel {
            features,
            tau2,
            sigma2,
        })
    }

    fn precision_parts(&self, data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
        let phi = self.features.design(data);
        let p = phi.ncols();
        let a = phi.tr_mul(&phi) / self.sigma2 + DMatrix::identity(p, p) / self.tau2;
        let b = phi.tr_mul(&data.y_vector()) / self.sigma2;
        (a, b)
    }

    fn posterior_from(&self, a: DMatrix<f64>, b: &DVector<f64>) -> Result<Posterior> {
        let chol = cholesky_jittered(a)?;
        Ok(Posterior {
            model: *self,
            mean: chol.solve(b),
            chol,
        })
    }

    /// Conjugate update; an empty dataset gives the prior.
    pub fn posterior(&self, data: &Dataset) -> Result<Posterior> {
        let (a, b) = self.precision_parts(data);
        self.posterior_from(a, &b)
    }

    /// Posteriors with each observation removed in turn, by downdating the
    /// full-data precision.
    pub fn loo_posteriors(&self, data: &Dataset) -> Result<Vec<Posterior>> {
        let (a, b) = self.precision_parts(data);
        (0..data.n())
            .map(|i| {
                let phi = DVector::from_vec(self.features.eval(data.point(i)));
                let ai = &a - &phi * phi.transpose() / self.sigma2;
                let bi = &b - &phi * (data.y()[i] / self.sigma2);
                self.posterior_from(ai, &bi)
            })
            .collect()
    }
}

/// Predictive mean and variance of `model` at `x_new` after observing `data`.
pub fn posterior_predictive(model: &GaussianLinearModel, data: &Dataset, x_new: &[f64]) -> Result<(f64, f64)> {
    Ok(model.posterior(data)?.predictive(x_new))
}

/// Posterior predictive mean.
pub fn bayes_point_predictor(model: &GaussianLinearModel, data: &Dataset, x_new: &[f64]) -> Result<f64> {
    Ok(posterior_predictive(model, data, x_new)?.0)
}

/// Prediction from the least-squares coefficients.
pub fn plugin_point_predictor(model: &GaussianLinearModel, data: &Dataset, x_new: &[f64]) -> Result<f64> {
    let fit = fit_linear(&model.features.design(data), &data.y_vector())?;
    Ok(DVector::from_vec(model.features.eval(x_new)).dot(&fit.coef))
}

/// One weighted normal component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalComponent {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

/// `sum_j weight_j N(mean_j, var_j)`; weights need not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<NormalComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<NormalComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture has no components"));
        }
        for c in &components {
            if !(c.var > 0.0) || !c.mean.is_finite() || !c.weight.is_finite() || !c.var.is_finite() {
                return Err(Error::invalid(format!("invalid mixture component {c:?}")));
            }
        }
        Ok(GaussianMixture { components })
    }

    pub fn single(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![NormalComponent {
            weight: 1.0,
            mean,
            var,
        }])
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * std_normal_cdf((t - c.mean) / c.var.sqrt()))
            .sum()
    }

    /// `log sum_j weight_j N(t; mean_j, var_j)`; all weights must be nonnegative.
    pub fn log_pdf(&self, t: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight.ln() + log_normal_pdf(t, c.mean, c.var))
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return top;
        }
        top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
    }

    pub fn pdf(&self, t: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * log_normal_pdf(t, c.mean, c.var).exp())
            .sum()
    }

    /// Median of a normalized mixture, by bisection on the CDF.
    pub fn median(&self) -> f64 {
        let (mut lo, mut hi) = self.envelope(10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `[min(mean - width sd), max(mean + width sd)]`.
    pub fn envelope(&self, width: f64) -> (f64, f64) {
        let lo = self
            .components
            .iter()
            .map(|c| c.mean - width * c.var.sqrt())
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .components
            .iter()
            .map(|c| c.mean + width * c.var.sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Draw from a normalized mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = self.components.len() - 1;
        for (j, c) in self.components.iter().enumerate() {
            if u < c.weight {
                pick = j;
                break;
            }
            u -= c.weight;
        }
        let c = self.components[pick];
        c.mean + c.var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Component models with fixed convex prior weights `pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMixture {
    pub models: Vec<GaussianLinearModel>,
    pub pi: Vec<f64>,
}

impl ModelMixture {
    pub fn new(models: Vec<GaussianLinearModel>, pi: Vec<f64>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("model mixture is empty"));
        }
        if pi.len() != models.len() {
            return Err(Error::DimensionMismatch {
                axis: "mixture weights vs models",
                expected: models.len(),
                found: pi.len(),
            });
        }
        check_convex(&pi, "mixture weights")?;
        Ok(ModelMixture { models, pi })
    }

    pub fn uniform(models: Vec<GaussianLinearModel>) -> Result<Self> {
        let j = models.len();
        Self::new(models, vec![1.0 / j.max(1) as f64; j])
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Posterior predictive `sum_j pi_j N(mu_j, s_j^2)` at `x_new`.
    pub fn predictive(&self, data: &Dataset, x_new: &[f64]) -> Result<GaussianMixture> {
        let components = self
            .models
            .iter()
            .zip(&self.pi)
            .map(|(m, &weight)| {
                let (mean, var) = posterior_predictive(m, data, x_new)?;
                Ok(NormalComponent { weight, mean, var })
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(components)
    }
}

fn check_convex(w: &[f64], what: &str) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("{what} must be nonnegative and sum to one, got {w:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossSpec {
    Squared,
    Absolute,
    LogUtility,
}

impl LossSpec {
    pub const ALL: [LossSpec; 3] = [LossSpec::Squared, LossSpec::Absolute, LossSpec::LogUtility];

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Squared => "squared",
            LossSpec::Absolute => "absolute",
            LossSpec::LogUtility => "log",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(LossSpec::Squared),
            "absolute" => Ok(LossSpec::Absolute),
            "log" | "log-utility" => Ok(LossSpec::LogUtility),
            _ => Err(Error::invalid(format!("unknown loss '{s}' (expected squared, absolute or log)"))),
        }
    }
}

/// Point prediction for squared and absolute loss, predictive density for
/// log-utility.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Point(f64),
    Density(GaussianMixture),
}

/// How each component turns a dataset into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    /// Posterior predictive mean, or the posterior predictive density.
    Bayes,
    /// Least-squares coefficients, or `N(phi' beta_hat, sigma2)`.
    Plugin,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 2] = [PredictorKind::Bayes, PredictorKind::Plugin];

    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::Bayes => "bayes",
            PredictorKind::Plugin => "plugin",
        }
    }
}

/// `E|Z - a|` for `Z ~ N(mu, s^2)`.
pub fn normal_abs_deviation(mu: f64, s: f64, a: f64) -> f64 {
    let d = (a - mu) / s;
    s * (2.0 / PI).sqrt() * (-0.5 * d * d).exp() + (a - mu) * (2.0 * std_normal_cdf(d) - 1.0)
}

/// Expected loss of `action` when the outcome follows `predictive`.
pub fn predictive_risk(predictive: &GaussianMixture, action: &Action, loss: LossSpec) -> Result<f64> {
    match (loss, action) {
        (LossSpec::Squared, Action::Point(a)) => Ok(predictive
            .components
            .iter()
            .map(|c| c.weight * (c.var + (c.mean - a).powi(2)))
            .sum()),
        (LossSpec::Absolute, Action::Point(a)) => Ok(predictive
            .components
            .iter()
            .map(|c| c.weight * normal_abs_deviation(c.mean, c.var.sqrt(), *a))
            .sum()),
        (LossSpec::LogUtility, Action::Density(q)) => {
            check_density_action(q)?;
            let (lo, hi) = predictive.envelope(10.0);
            integrate(|t| -q.log_pdf(t) * predictive.pdf(t), lo, hi, QUADRATURE_TOL)
        }
        (LossSpec::LogUtility, Action::Point(_)) => Err(Error::invalid("log-utility needs a density action")),
        (_, Action::Density(_)) => Err(Error::invalid("squared and absolute loss need a point action")),
    }
}

fn check_density_action(q: &GaussianMixture) -> Result<()> {
    if q.components.iter().any(|c| c.weight < 0.0) || q.components.iter().all(|c| c.weight == 0.0) {
        return Err(Error::invalid("log-utility actions need nonnegative, not all zero, weights"));
    }
    Ok(())
}

/// Posterior risk of `action` at `x_new` under the mixture's predictive.
pub fn posterior_risk(
    mixture: &ModelMixture,
    data: &Dataset,
    x_new: &[f64],
    action: &Action,
    loss: LossSpec,
) -> Result<f64> {
    predictive_risk(&mixture.predictive(data, x_new)?, action, loss)
}

/// Loss of a realized outcome `y` under `action`.
pub fn realized_loss(y: f64, action: &Action, loss: LossSpec) -> Result<f64> {
    match (loss, action) {
        (LossSpec::Squared, Action::Point(a)) => Ok((y - a).powi(2)),
        (LossSpec::Absolute, Action::Point(a)) => Ok((y - a).abs()),
        (LossSpec::LogUtility, Action::Density(q)) => {
            check_density_action(q)?;
            Ok(-q.log_pdf(y))
        }
        (LossSpec::LogUtility, Action::Point(_)) => Err(Error::invalid("log-utility needs a density action")),
        (_, Action::Density(_)) => Err(Error::invalid("squared and absolute loss need a point action")),
    }
}

fn check_weights(mixture: &ModelMixture, w: &[f64]) -> Result<()> {
    if w.len() != mixture.len() {
        return Err(Error::DimensionMismatch {
            axis: "action weights vs models",
            expected: mixture.len(),
            found: w.len(),
        });
    }
    Ok(())
}

/// One component's prediction: mean and, for densities, variance.
fn component_prediction(
    model: &GaussianLinearModel,
    data: &Dataset,
    x_new: &[f64],
    kind: PredictorKind,
) -> Result<(f64, f64)> {
    match kind {
        PredictorKind::Bayes => posterior_predictive(model, data, x_new),
        PredictorKind::Plugin => Ok((plugin_point_predictor(model, data, x_new)?, model.sigma2)),
    }
}

fn action_from(preds: &[(f64, f64)], w: &[f64], loss: LossSpec) -> Result<Action> {
    Ok(match loss {
        LossSpec::Squared | LossSpec::Absolute => {
            Action::Point(preds.iter().zip(w).map(|((mu, _), wj)| wj * mu).sum())
        }
        LossSpec::LogUtility => Action::Density(GaussianMixture::new(
            preds
                .iter()
                .zip(w)
                .map(|(&(mean, var), &weight)| NormalComponent { weight, mean, var })
                .collect(),
        )?),
    })
}

/// The action `sum_j w_j (prediction of component j)` at `x_new`.
pub fn stacked_action(
    mixture: &ModelMixture,
    data: &Dataset,
    x_new: &[f64],
    w: &[f64],
    loss: LossSpec,
    kind: PredictorKind,
) -> Result<Action> {
    check_weights(mixture, w)?;
    let preds = mixture
        .models
        .iter()
        .map(|m| component_prediction(m, data, x_new, kind))
        .collect::<Result<Vec<_>>>()?;
    action_from(&preds, w, loss)
}

/// Held-out predictions (mean, variance) of one component for every row.
fn loo_predictions(model: &GaussianLinearModel, data: &Dataset, kind: PredictorKind) -> Result<Vec<(f64, f64)>> {
    match kind {
        PredictorKind::Bayes => Ok(model
            .loo_posteriors(data)?
            .iter()
            .enumerate()
            .map(|(i, post)| post.predictive(data.point(i)))
            .collect()),
        PredictorKind::Plugin => {
            let y = data.y_vector();
            let fit = fit_linear(&model.features.design(data), &y)?;
            Ok(loo_linear(&fit, &y)?.iter().map(|&mu| (mu, model.sigma2)).collect())
        }
    }
}

/// `(1/n) sum_i loss(y_i, a(y_{-i}))` for the stacked action with weights `w`.
pub fn cv_risk(mixture: &ModelMixture, data: &Dataset, w: &[f64], loss: LossSpec, kind: PredictorKind) -> Result<f64> {
    check_weights(mixture, w)?;
    let n = data.n();
    if n < 2 {
        return Err(Error::invalid(format!("cross-validation risk needs n >= 2, got {n}")));
    }
    let per_model = mixture
        .models
        .iter()
        .map(|m| loo_predictions(m, data, kind))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..n {
        let preds: Vec<(f64, f64)> = per_model.iter().map(|p| p[i]).collect();
        total += realized_loss(data.y()[i], &action_from(&preds, w, loss)?, loss)?;
    }
    Ok(total / n as f64)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point
/// Gauss rule.
fn kronrod15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * XGK[i]) + f(c + h * XGK[i]);
        k += WGK[i] * pair;
        if i % 2 == 1 {
            g += WG[i / 2] * pair;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Globally adaptive Gauss-Kronrod integration to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut parts = vec![(a, b, kronrod15(&f, a, b))];
    loop {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Quadrature { estimate: err });
        }
        if err <= tol {
            return Ok(total);
        }
        if parts.len() >= MAX_SUBINTERVALS {
            return Err(Error::Quadrature { estimate: err });
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .expect("nonempty");
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, kronrod15(&f, lo, mid)));
        parts.push((mid, hi, kronrod15(&f, mid, hi)));
    }
}

/// Data-generating process `y = g(x) + N(0, noise_sd^2)`, `x ~ U[lo, hi]`.
#[derive(Clone)]
pub struct Truth {
    pub g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub noise_sd: f64,
    pub domain: (f64, f64),
    pub label: String,
}

impl std::fmt::Debug for Truth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Truth")
            .field("label", &self.label)
            .field("noise_sd", &self.noise_sd)
            .field("domain", &self.domain)
            .finish()
    }
}

impl Truth {
    /// `sin(pi x)` on `[0, 1]`.
    pub fn sine(noise_sd: f64) -> Self {
        Truth {
            g: Arc::new(|x| (PI * x).sin()),
            noise_sd,
            domain: (0.0, 1.0),
            label: "sin(pi x)".into(),
        }
    }

    /// `sum_k coefs[k] x^k` on `[0, 1]`.
    pub fn polynomial(coefs: Vec<f64>, noise_sd: f64) -> Self {
        let label = format!("polynomial {coefs:?}");
        Truth {
            g: Arc::new(move |x| coefs.iter().rev().fold(0.0, |acc, c| acc * x + c)),
            noise_sd,
            domain: (0.0, 1.0),
            label,
        }
    }

    pub fn simulate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let (lo, hi) = self.domain;
        let x: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| (self.g)(v) + self.noise_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::univariate(&x, &y)
    }
}

/// Everything the convergence simulator needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub truth: Truth,
    pub mixture: ModelMixture,
    pub weights: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub reps: usize,
}

impl ExperimentConfig {
    /// `sin(pi x)` with noise sd 0.5, cubic and quintic components
    /// (`tau2 = 10`, matching noise variance), uniform `pi`, `w = (1/2, 1/2)`.
    pub fn default_m_complete() -> Self {
        let sd = 0.5;
        let models = [3, 5]
            .iter()
            .map(|&d| GaussianLinearModel {
                features: FeatureMap::Polynomial(d),
                tau2: 10.0,
                sigma2: sd * sd,
            })
            .collect();
        ExperimentConfig {
            truth: Truth::sine(sd),
            mixture: ModelMixture::uniform(models).expect("valid default mixture"),
            weights: vec![0.5, 0.5],
            n_grid: vec![50, 200, 800],
            reps: 50,
        }
    }

    /// A cubic truth inside the single cubic component, `w = (1)`.
    pub fn truth_inside() -> Self {
        let sd = 0.5;
        let model = GaussianLinearModel {
            features: FeatureMap::Polynomial(3),
            tau2: 10.0,
            sigma2: sd * sd,
        };
        ExperimentConfig {
            truth: Truth::polynomial(vec![0.5, -1.0, 2.0, -1.5], sd),
            mixture: ModelMixture::uniform(vec![model]).expect("valid mixture"),
            weights: vec![1.0],
            n_grid: vec![50, 200, 800],
            reps: 50,
        }
    }
}

/// Replicate gaps `|posterior risk - CV risk|` for each sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub loss: LossSpec,
    pub kind: PredictorKind,
    pub n_grid: Vec<usize>,
    /// `gaps[i][r]` is replicate `r` at `n_grid[i]`.
    pub gaps: Vec<Vec<f64>>,
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl GapReport {
    pub fn median(&self, i: usize) -> f64 {
        quantile(&self.gaps[i], 0.5)
    }

    pub fn p90(&self, i: usize) -> f64 {
        quantile(&self.gaps[i], 0.9)
    }

    pub fn rms(&self, i: usize) -> f64 {
        let g = &self.gaps[i];
        (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt()
    }
}

/// Posterior-minus-CV risk gap of one simulated replicate.
pub fn replicate_gap(
    config: &ExperimentConfig,
    n: usize,
    loss: LossSpec,
    kind: PredictorKind,
    plan: &RngPlan,
) -> Result<f64> {
    let mut rng = plan.rng();
    let data = config.truth.simulate(n, &mut rng)?;
    let (lo, hi) = config.truth.domain;
    let x_new = [lo + (hi - lo) * rng.random::<f64>()];
    let action = stacked_action(&config.mixture, &data, &x_new, &config.weights, loss, kind)?;
    let post = posterior_risk(&config.mixture, &data, &x_new, &action, loss)?;
    let cv = cv_risk(&config.mixture, &data, &config.weights, loss, kind)?;
    let gap = (post - cv).abs();
    if !gap.is_finite() {
        return Err(Error::NonFinite {
            what: "risk gap",
            index: n,
        });
    }
    Ok(gap)
}

/// Runs every `(n, replicate)` cell on its own `SIMULATION` substream.
///
/// Replicate `r` at size `n` uses substream `(simulation, n), (rep, r)`, so
/// results do not depend on the rest of the grid or on scheduling.
pub fn convergence_experiment(
    config: &ExperimentConfig,
    loss: LossSpec,
    kind: PredictorKind,
    plan: &RngPlan,
) -> Result<GapReport> {
    if config.n_grid.is_empty() || config.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("n grid must be nonempty and increasing, got {:?}", config.n_grid)));
    }
    if config.reps < 10 {
        return Err(Error::invalid(format!("need at least 10 replicates, got {}", config.reps)));
    }
    check_weights(&config.mixture, &config.weights)?;
    if loss == LossSpec::LogUtility {
        check_convex(&config.weights, "log-utility action weights")?;
    }
    let cells: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.reps).map(move |r| (n, r)))
        .collect();
    let gaps: Vec<f64> = cells
        .par_iter()
        .map(|&(n, r)| {
            let cell = plan.substream(SIMULATION, n as u64).substream("rep", r as u64);
            replicate_gap(config, n, loss, kind, &cell)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport {
        loss,
        kind,
        n_grid: config.n_grid.clone(),
        gaps: gaps.chunks(config.reps).map(<[f64]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(tau2: f64, sigma2: f64) -> GaussianLinearModel {
        GaussianLinearModel::new(FeatureMap::Intercept, tau2, sigma2).unwrap()
    }

    #[test]
    fn hand_conjugate_update() {
        let data = Dataset::univariate(&[0.3, 0.9], &[2.0, 7.0]).unwrap().subset(&[0]);
        let (mu, s2) = posterior_predictive(&intercept(1.0, 1.0), &data, &[5.0]).unwrap();
        assert!((mu - 1.0).abs() < 1e-14);
        assert!((s2 - 1.5).abs() < 1e-14);
    }

    #[test]
    fn prior_predictive_without_data() {
        let m = GaussianLinearModel::new(FeatureMap::Polynomial(2), 3.0, 0.5).unwrap();
        let (mu, s2) = posterior_predictive(&m, &Dataset::empty(1), &[2.0]).unwrap();
        assert_eq!(mu, 0.0);
        assert!((s2 - (0.5 + 3.0 * (1.0 + 4.0 + 16.0))).abs() < 1e-12);
    }

    #[test]
    fn degenerate_prior() {
        let data = Dataset::univariate(&[0.0, 1.0], &[4.0, 5.0]).unwrap();
        let (mu, s2) = posterior_predictive(&intercept(1e-12, 2.0), &data, &[0.5]).unwrap();
        assert!(mu.abs() < 1e-10);
        assert!((s2 - 2.0).abs() < 1e-10);
    }

    #[test]
    fn plugin_examples() {
        let data = Dataset::univariate(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert!((plugin_point_predictor(&intercept(1.0, 1.0), &data, &[7.0]).unwrap() - 2.0).abs() < 1e-14);
        let x: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v).collect();
        let data = Dataset::univariate(&x, &y).unwrap();
        let m = GaussianLinearModel::new(FeatureMap::Polynomial(2), 1.0, 1.0).unwrap();
        let p = plugin_point_predictor(&m, &data, &[0.37]).unwrap();
        assert!((p - (1.0 - 0.74 + 0.5 * 0.37 * 0.37)).abs() < 1e-12);
    }

    #[test]
    fn flat_prior_limit_matches_plugin() {
        let mut rng = RngPlan::new(3).substream("bayes-test", 0).rng();
        let data = Truth::sine(0.3).simulate(100, &mut rng).unwrap();
        let m = GaussianLinearModel::new(FeatureMap::Polynomial(3), 1e10, 0.09).unwrap();
        let b = bayes_point_predictor(&m, &data, &[0.42]).unwrap();
        let p = plugin_point_predictor(&m, &data, &[0.42]).unwrap();
        assert!((b - p).abs() <= 1e-6, "{b} vs {p}");
    }

    #[test]
    fn loo_downdate_matches_refit() {
        let mut rng = RngPlan::new(4).substream("bayes-test", 0).rng();
        let data = Truth::sine(0.3).simulate(15, &mut rng).unwrap();
        let m = GaussianLinearModel::new(FeatureMap::Polynomial(2), 2.0, 0.2).unwrap();
        let loo = m.loo_posteriors(&data).unwrap();
        for i in 0..data.n() {
            let refit = m.posterior(&data.complement(&[i])).unwrap();
            let (a, b) = (loo[i].predictive(&[0.3]), refit.predictive(&[0.3]));
            assert!((a.0 - b.0).abs() < 1e-10 && (a.1 - b.1).abs() < 1e-10);
        }
    }

    #[test]
    fn single_model_closed_forms() {
        let p = GaussianMixture::single(1.5, 0.49).unwrap();
        let sq = predictive_risk(&p, &Action::Point(1.5), LossSpec::Squared).unwrap();
        assert!((sq - 0.49).abs() < 1e-15);
        let ab = predictive_risk(&p, &Action::Point(1.5), LossSpec::Absolute).unwrap();
        assert!((ab - 0.7 * (2.0 / PI).sqrt()).abs() < 1e-14);
        let lg = predictive_risk(&p, &Action::Density(p.clone()), LossSpec::LogUtility).unwrap();
        let entropy = 0.5 * (2.0 * PI * std::f64::consts::E * 0.49).ln();
        assert!((lg - entropy).abs() < 1e-6);
    }

    #[test]
    fn mismatched_action_is_rejected() {
        let p = GaussianMixture::single(0.0, 1.0).unwrap();
        assert!(predictive_risk(&p, &Action::Point(0.0), LossSpec::LogUtility).is_err());
        assert!(predictive_risk(&p, &Action::Density(p.clone()), LossSpec::Squared).is_err());
    }

    #[test]
    fn quadrature_integrates_known_functions() {
        let v = integrate(|t| t.exp(), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        let v = integrate(|t| (-t * t).exp(), -10.0, 10.0, 1e-10).unwrap();
        assert!((v - PI.sqrt()).abs() < 1e-10);
        assert!(integrate(|t| 1.0 / t, 0.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn squared_risk_minimized_at_mixture_mean() {
        let p = GaussianMixture::new(vec![
            NormalComponent { weight: 0.3, mean: -1.0, var: 0.5 },
            NormalComponent { weight: 0.7, mean: 2.0, var: 1.5 },
        ])
        .unwrap();
        let a = p.mean();
        let r = |a: f64| predictive_risk(&p, &Action::Point(a), LossSpec::Squared).unwrap();
        assert!(r(a) < r(a + 1e-4) && r(a) < r(a - 1e-4));
    }

    #[test]
    fn absolute_risk_minimized_at_mixture_median() {
        let p = GaussianMixture::new(vec![
            NormalComponent { weight: 0.6, mean: 0.0, var: 0.2 },
            NormalComponent { weight: 0.4, mean: 3.0, var: 2.0 },
        ])
        .unwrap();
        let med = p.median();
        assert!((p.cdf(med) - 0.5).abs() < 1e-12);
        let r = |a: f64| predictive_risk(&p, &Action::Point(a), LossSpec::Absolute).unwrap();
        assert!(r(med) < r(med + 1e-4) && r(med) < r(med - 1e-4));
        assert!((med - p.mean()).abs() > 0.1);
    }

    #[test]
    fn cv_risk_by_hand() {
        // Leaving out y=1 leaves y=3: mean 1.5. Leaving out y=3: mean 0.5.
        let data = Dataset::univariate(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        let mix = ModelMixture::uniform(vec![intercept(1.0, 1.0)]).unwrap();
        let sq = cv_risk(&mix, &data, &[1.0], LossSpec::Squared, PredictorKind::Bayes).unwrap();
        assert!((sq - 3.25).abs() < 1e-14);
        let ab = cv_risk(&mix, &data, &[1.0], LossSpec::Absolute, PredictorKind::Bayes).unwrap();
        assert!((ab - 1.5).abs() < 1e-14);
        let lg = cv_risk(&mix, &data, &[1.0], LossSpec::LogUtility, PredictorKind::Bayes).unwrap();
        let expect = 0.5 * (2.0 * PI * 1.5).ln() + (0.25 + 6.25) / (2.0 * 1.5 * 2.0);
        assert!((lg - expect).abs() < 1e-14);
    }

    #[test]
    fn cv_risk_single_plugin_is_mean_squared_loo_residual() {
        let mut rng = RngPlan::new(5).substream("bayes-test", 0).rng();
        let data = Truth::sine(0.2).simulate(30, &mut rng).unwrap();
        let model = GaussianLinearModel::new(FeatureMap::Polynomial(2), 1.0, 0.04).unwrap();
        let mix = ModelMixture::uniform(vec![model]).unwrap();
        let risk = cv_risk(&mix, &data, &[1.0], LossSpec::Squared, PredictorKind::Plugin).unwrap();
        let mut direct = 0.0;
        for i in 0..data.n() {
            let p = plugin_point_predictor(&model, &data.complement(&[i]), data.point(i)).unwrap();
            direct += (data.y()[i] - p).powi(2) / data.n() as f64;
        }
        assert!((risk - direct).abs() < 1e-10);
    }

    #[test]
    fn cv_risk_vanishes_without_noise() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 + v - v * v * v).collect();
        let data = Dataset::univariate(&x, &y).unwrap();
        let model = GaussianLinearModel::new(FeatureMap::Polynomial(3), 1e6, 1e-8).unwrap();
        let mix = ModelMixture::uniform(vec![model]).unwrap();
        assert!(cv_risk(&mix, &data, &[1.0], LossSpec::Squared, PredictorKind::Bayes).unwrap() < 1e-12);
    }

    #[test]
    fn experiment_is_deterministic_and_validates() {
        let mut cfg = ExperimentConfig::default_m_complete();
        cfg.n_grid = vec![20, 40];
        cfg.reps = 10;
        let plan = RngPlan::new(11);
        let a = convergence_experiment(&cfg, LossSpec::Absolute, PredictorKind::Bayes, &plan).unwrap();
        let b = convergence_experiment(&cfg, LossSpec::Absolute, PredictorKind::Bayes, &plan).unwrap();
        assert_eq!(a, b);
        assert!(a.gaps.iter().flatten().all(|g| g.is_finite() && *g >= 0.0));
        cfg.reps = 5;
        assert!(convergence_experiment(&cfg, LossSpec::Squared, PredictorKind::Bayes, &plan).is_err());
        cfg.reps = 10;
        cfg.weights = vec![1.5, -0.5];
        assert!(convergence_experiment(&cfg, LossSpec::LogUtility, PredictorKind::Bayes, &plan).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
