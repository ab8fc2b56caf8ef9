//! The stacking objective and the empirical inner product.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::types::LooMatrix;

/// Sum over observations of `(y_i - sum_j w_j * preds[i, j])^2`.
pub fn stacking_error(loo: &LooMatrix, y: &DVector<f64>, w: &DVector<f64>) -> Result<f64> {
    if y.len() != loo.n() {
        return Err(Error::DimensionMismatch {
            axis: "observations (rows)",
            expected: loo.n(),
            found: y.len(),
        });
    }
    if w.len() != loo.n_models() {
        return Err(Error::DimensionMismatch {
            axis: "models (columns)",
            expected: loo.n_models(),
            found: w.len(),
        });
    }
    let residual = y - loo.preds() * w;
    Ok(residual.norm_squared())
}

/// `<g, h>_n = (1/n) sum_i g(x_i) h(x_i)` over the design points.
pub fn empirical_inner_product(g: &[f64], h: &[f64]) -> Result<f64> {
    if g.len() != h.len() {
        return Err(Error::DimensionMismatch {
            axis: "evaluation vectors",
            expected: g.len(),
            found: h.len(),
        });
    }
    if g.is_empty() {
        return Err(Error::invalid("inner product over zero design points"));
    }
    let s: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
    Ok(s / g.len() as f64)
}
