//! Shared domain types: observed data, held-out prediction matrices and weight solutions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Design points `x_i` (row-major, `d` coordinates each) and responses `y_i`.
///
/// [`Dataset::new`] enforces `n >= 2`. Subsets produced by [`Dataset::subset`]
/// may be smaller, since fold complements and sequential prefixes can hold a
/// single point (or none, for prior predictives).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
}

impl Dataset {
    /// Builds a dataset from an `n x d` design matrix and a response vector.
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                axis: "rows of x vs length of y",
                expected: x.nrows(),
                found: y.len(),
            });
        }
        let mut points = Vec::with_capacity(x.len());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                points.push(x[(i, j)]);
            }
        }
        Self::from_rows(points, y.iter().copied().collect(), x.ncols())
    }

    /// Builds a dataset from row-major points.
    pub fn from_rows(points: Vec<f64>, y: Vec<f64>, dim: usize) -> Result<Self> {
        let data = Self::unchecked_size(points, y, dim)?;
        if data.n() < 2 {
            return Err(Error::invalid(format!(
                "dataset needs at least 2 rows, got {}",
                data.n()
            )));
        }
        Ok(data)
    }

    /// Univariate convenience constructor.
    pub fn univariate(x: &[f64], y: &[f64]) -> Result<Self> {
        Self::from_rows(x.to_vec(), y.to_vec(), 1)
    }

    /// Dataset with no rows, used for prior predictives.
    pub fn empty(dim: usize) -> Self {
        Dataset {
            points: Vec::new(),
            y: Vec::new(),
            dim: dim.max(1),
        }
    }

    fn unchecked_size(points: Vec<f64>, y: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset needs at least one explanatory column"));
        }
        if points.len() != y.len() * dim {
            return Err(Error::DimensionMismatch {
                axis: "rows of x vs length of y",
                expected: y.len(),
                found: points.len() / dim,
            });
        }
        if let Some(index) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "x", index });
        }
        if let Some(index) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "y", index });
        }
        Ok(Dataset { points, y, dim })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// Rows at `indices`, in that order. Repeated indices are allowed (bootstrap).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            points.extend_from_slice(self.point(i));
            y.push(self.y[i]);
        }
        Dataset {
            points,
            y,
            dim: self.dim,
        }
    }

    /// All rows except those in `excluded`.
    pub fn complement(&self, excluded: &[usize]) -> Dataset {
        let mut skip = vec![false; self.n()];
        for &i in excluded {
            skip[i] = true;
        }
        let keep: Vec<usize> = (0..self.n()).filter(|&i| !skip[i]).collect();
        self.subset(&keep)
    }

    /// Univariate dataset of coordinate `column` against the same responses.
    pub fn column(&self, column: usize) -> Dataset {
        Dataset {
            points: (0..self.n()).map(|i| self.point(i)[column]).collect(),
            y: self.y.clone(),
            dim: 1,
        }
    }

    /// Axis-aligned bounding box of the design points, as `(lower, upper)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for i in 0..self.n() {
            for (k, &v) in self.point(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    }
}

/// Held-out predictions `preds[(i, j)] = yhat_{j,-i}(x_i)` for `J` component
/// predictors, together with the leave-k-out order that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LooMatrix {
    preds: DMatrix<f64>,
    k: usize,
}

impl LooMatrix {
    pub fn new(preds: DMatrix<f64>, k: usize) -> Result<Self> {
        if preds.ncols() == 0 {
            return Err(Error::invalid("held-out prediction matrix needs at least one column"));
        }
        if preds.nrows() == 0 {
            return Err(Error::invalid("held-out prediction matrix needs at least one row"));
        }
        if k == 0 {
            return Err(Error::invalid("leave-k-out order must be positive"));
        }
        if let Some(index) = preds.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "held-out predictions",
                index,
            });
        }
        Ok(LooMatrix { preds, k })
    }

    /// Leave-one-out matrix.
    pub fn from_predictions(preds: DMatrix<f64>) -> Result<Self> {
        Self::new(preds, 1)
    }

    pub fn preds(&self) -> &DMatrix<f64> {
        &self.preds
    }

    pub fn n(&self) -> usize {
        self.preds.nrows()
    }

    pub fn n_models(&self) -> usize {
        self.preds.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The matrix without column `j`.
    pub fn without_column(&self, j: usize) -> Result<Self> {
        if self.n_models() < 2 {
            return Err(Error::invalid("cannot drop the only column"));
        }
        Self::new(self.preds.clone().remove_column(j), self.k)
    }
}

/// Constraint on the sum of the stacking weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintSpec {
    Unconstrained,
    SumTo(f64),
}

impl ConstraintSpec {
    pub fn sum_to(m: f64) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::invalid(format!("constraint sum must be finite, got {m}")));
        }
        if m == 0.0 {
            return Err(Error::ZeroConstraint);
        }
        Ok(ConstraintSpec::SumTo(m))
    }

    /// Whether `w` satisfies the constraint to `1e-10 * max(1, |m|)`.
    pub fn is_satisfied_by(&self, w: &DVector<f64>) -> bool {
        match *self {
            ConstraintSpec::Unconstrained => true,
            ConstraintSpec::SumTo(m) => (w.sum() - m).abs() <= 1e-10 * m.abs().max(1.0),
        }
    }
}

/// Stacking weights, the constraint they satisfy and the achieved objective.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub w: DVector<f64>,
    pub constraint: ConstraintSpec,
    pub q: f64,
}
