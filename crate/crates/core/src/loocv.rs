//! Held-out predictions: the leverage shortcut for linear fits and generic
//! refitting over a fold schedule for everything else.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{rcond, RCOND_THRESHOLD};
use crate::rng::{RngPlan, FOLDS};
use crate::types::{Dataset, LooMatrix};

/// A fitted regression function.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

impl<F> Predictor for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// A deterministic model-fitting procedure.
pub trait Fitter: Sync {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>>;
}

impl<F> Fitter for F
where
    F: Fn(&Dataset) -> Result<Box<dyn Predictor>> + Sync,
{
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        self(data)
    }
}

/// Ordinary least-squares fit with its hat-matrix diagonal.
#[derive(Debug, Clone)]
pub struct LinearModelFit {
    pub design: DMatrix<f64>,
    pub coef: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub leverages: DVector<f64>,
}

/// Least squares through a Householder QR of the design.
///
/// Leverages are the squared row norms of the thin `Q` factor, which stays
/// accurate when `h_ii` approaches one.
pub fn fit_linear(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearModelFit> {
    let (n, p) = design.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            axis: "rows of design vs length of y",
            expected: n,
            found: y.len(),
        });
    }
    if p == 0 || n <= p {
        return Err(Error::invalid(format!(
            "least squares needs more rows than columns, got n={n}, p={p}"
        )));
    }
    let qr = design.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let rc = rcond(&r);
    if rc < RCOND_THRESHOLD {
        return Err(Error::Singular {
            what: "design matrix (rank deficient)",
            rcond: rc,
        });
    }
    let qty = q.transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::Singular {
            what: "design matrix (rank deficient)",
            rcond: rc,
        })?;
    let fitted = &q * qty;
    let residuals = y - &fitted;
    let leverages = DVector::from_fn(n, |i, _| {
        q.row(i).norm_squared().clamp(0.0, 1.0)
    });
    Ok(LinearModelFit {
        design: design.clone(),
        coef,
        fitted,
        residuals,
        leverages,
    })
}

/// `yhat_{-i}(x_i) = y_i - e_i / (1 - h_ii)` for every observation.
pub fn loo_linear(fit: &LinearModelFit, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != fit.residuals.len() {
        return Err(Error::DimensionMismatch {
            axis: "length of y vs fitted model",
            expected: fit.residuals.len(),
            found: y.len(),
        });
    }
    let mut out = DVector::zeros(y.len());
    for i in 0..y.len() {
        let h = fit.leverages[i];
        if h >= 1.0 - 1e-10 {
            return Err(Error::UnitLeverage { row: i, leverage: h });
        }
        out[i] = y[i] - fit.residuals[i] / (1.0 - h);
    }
    Ok(out)
}

/// Held-out blocks; every observation appears in exactly one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    blocks: Vec<Vec<usize>>,
    k: usize,
}

impl FoldPlan {
    pub fn leave_one_out(n: usize) -> Self {
        FoldPlan {
            blocks: (0..n).map(|i| vec![i]).collect(),
            k: 1,
        }
    }

    /// Contiguous blocks of size `k` over a seeded random permutation; the
    /// last block holds the remainder.
    pub fn leave_k_out(n: usize, k: usize, plan: &RngPlan) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(Error::invalid(format!("leave-k-out needs 1 <= k < n, got k={k}, n={n}")));
        }
        if k == 1 {
            return Ok(Self::leave_one_out(n));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut plan.substream(FOLDS, k as u64).rng());
        Ok(FoldPlan {
            blocks: order.chunks(k).map(<[usize]>::to_vec).collect(),
            k,
        })
    }

    /// An explicit partition of `0..n`.
    pub fn from_blocks(n: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in blocks.iter().flatten() {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!("fold blocks are not a partition of 0..{n}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || blocks.iter().any(Vec::is_empty) {
            return Err(Error::invalid(format!("fold blocks are not a partition of 0..{n}")));
        }
        let k = blocks.iter().map(Vec::len).max().unwrap_or(1);
        Ok(FoldPlan { blocks, k })
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Refits `fitter` on the complement of each block and predicts the block.
///
/// Entry `i` of the result is the prediction for observation `i` from the
/// fit that excluded it. Folds run in parallel; results are deterministic.
pub fn loo_refit(fitter: &dyn Fitter, data: &Dataset, plan: &FoldPlan) -> Result<DVector<f64>> {
    let n = data.n();
    if plan.blocks.iter().flatten().count() != n {
        return Err(Error::DimensionMismatch {
            axis: "fold plan vs observations",
            expected: n,
            found: plan.blocks.iter().flatten().count(),
        });
    }
    let per_fold: Vec<Result<Vec<(usize, f64)>>> = plan
        .blocks
        .par_iter()
        .enumerate()
        .map(|(fold, block)| {
            if block.len() >= n {
                return Err(Error::invalid("a fold holds out every observation"));
            }
            let model = fitter.fit(&data.complement(block)).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })?;
            Ok(block.iter().map(|&i| (i, model.predict(data.point(i)))).collect())
        })
        .collect();
    let mut out = DVector::zeros(n);
    for fold in per_fold {
        for (i, v) in fold? {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Column-stacks held-out prediction vectors.
pub fn assemble_loo_matrix(columns: &[DVector<f64>], k: usize) -> Result<LooMatrix> {
    let first = columns
        .first()
        .ok_or_else(|| Error::invalid("no held-out prediction columns"))?;
    for c in columns {
        if c.len() != first.len() {
            return Err(Error::DimensionMismatch {
                axis: "held-out prediction column length",
                expected: first.len(),
                found: c.len(),
            });
        }
    }
    LooMatrix::new(DMatrix::from_columns(columns), k)
}

/// Linear model in a fixed feature map.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    pub features: FeatureMap,
    pub coef: DVector<f64>,
}

impl Predictor for LinearPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        self.features
            .eval(x)
            .iter()
            .zip(self.coef.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Least-squares fitter over a [`FeatureMap`].
#[derive(Debug, Clone, Copy)]
pub struct FeatureFitter(pub FeatureMap);

impl Fitter for FeatureFitter {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        let fit = fit_linear(&self.0.design(data), &data.y_vector())?;
        Ok(Box::new(LinearPredictor {
            features: self.0,
            coef: fit.coef,
        }))
    }
}

/// Predicts the mean of the training responses.
#[derive(Debug, Clone, Copy)]
pub struct MeanFitter;

struct Constant(f64);

impl Predictor for Constant {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

impl Fitter for MeanFitter {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        if data.n() == 0 {
            return Err(Error::invalid("mean of zero observations"));
        }
        Ok(Box::new(Constant(data.y().iter().sum::<f64>() / data.n() as f64)))
    }
}
