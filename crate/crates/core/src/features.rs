//! Regressor maps `x -> phi(x)` for linear-in-parameters models.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureMap {
    /// `phi(x) = (1)`.
    Intercept,
    /// `phi(x) = (1, x_1, ..., x_d)`.
    Affine,
    /// `phi(x) = (1, x_1, x_1^2, ..., x_1^degree)` on the first coordinate.
    Polynomial(usize),
}

impl FeatureMap {
    pub fn len(&self, dim: usize) -> usize {
        match *self {
            FeatureMap::Intercept => 1,
            FeatureMap::Affine => 1 + dim,
            FeatureMap::Polynomial(deg) => 1 + deg,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            FeatureMap::Intercept => vec![1.0],
            FeatureMap::Affine => std::iter::once(1.0).chain(x.iter().copied()).collect(),
            FeatureMap::Polynomial(deg) => {
                let mut out = Vec::with_capacity(deg + 1);
                let mut p = 1.0;
                for _ in 0..=deg {
                    out.push(p);
                    p *= x[0];
                }
                out
            }
        }
    }

    /// Design matrix with one row per observation.
    pub fn design(&self, data: &Dataset) -> DMatrix<f64> {
        let p = self.len(data.dim());
        let mut m = DMatrix::zeros(data.n(), p);
        for i in 0..data.n() {
            for (k, v) in self.eval(data.point(i)).into_iter().enumerate() {
                m[(i, k)] = v;
            }
        }
        m
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "intercept" => Ok(FeatureMap::Intercept),
            "affine" | "linear" => Ok(FeatureMap::Affine),
            _ => s
                .strip_prefix("poly")
                .and_then(|d| d.trim_start_matches(':').parse().ok())
                .map(FeatureMap::Polynomial)
                .ok_or_else(|| Error::invalid(format!("unknown feature map '{s}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluations() {
        assert_eq!(FeatureMap::Intercept.eval(&[3.0]), vec![1.0]);
        assert_eq!(FeatureMap::Affine.eval(&[3.0, 4.0]), vec![1.0, 3.0, 4.0]);
        assert_eq!(FeatureMap::Polynomial(3).eval(&[2.0]), vec![1.0, 2.0, 4.0, 8.0]);
        assert_eq!(FeatureMap::parse("poly:2").unwrap(), FeatureMap::Polynomial(2));
        assert!(FeatureMap::parse("cubic").is_err());
    }
}
