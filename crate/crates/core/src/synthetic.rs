//! Additive test data `y = mu + sum_v g_v(x_v) + noise` with heterogeneous
//! component shapes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::io::format_float;
use crate::rng::{RngPlan, SIMULATION};

pub const N_VARIABLES: usize = 6;
pub const INTERCEPT: f64 = 4.0;
pub const NOISE_SD: f64 = 0.5;
/// Seed of the shipped `data/synthetic_additive.csv`.
pub const DEFAULT_SEED: u64 = 20240611;

/// The component function of variable `v` (0-based) on `[0, 1]`.
pub fn component(v: usize, x: f64) -> f64 {
    match v {
        0 => (2.0 * PI * x).sin(),
        1 => 2.0 * x - 1.0,
        2 => 6.0 * (x - 0.5).powi(2) - 0.5,
        3 => 1.5 * (-30.0 * (x - 0.3).powi(2)).exp() - 0.4,
        4 => (8.0 * (x - 0.6)).tanh(),
        5 => 0.8 * (3.0 * PI * x).cos() * (1.0 - x),
        _ => 0.0,
    }
}

/// Column headers `x1..x6, y`.
pub fn headers() -> Vec<String> {
    (1..=N_VARIABLES)
        .map(|v| format!("x{v}"))
        .chain(std::iter::once("y".to_string()))
        .collect()
}

/// `n` rows of `(x_1, ..., x_6, y)`.
pub fn generate(n: usize, plan: &RngPlan) -> Vec<Vec<f64>> {
    let mut rng = plan.substream(SIMULATION, 0).rng();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..N_VARIABLES).map(|_| rng.random::<f64>()).collect();
            let mean = INTERCEPT + x.iter().enumerate().map(|(v, &xv)| component(v, xv)).sum::<f64>();
            let y = mean + NOISE_SD * rng.sample::<f64, _>(StandardNormal);
            x.into_iter().chain(std::iter::once(y)).collect()
        })
        .collect()
}

/// CSV text of [`generate`].
pub fn to_csv(rows: &[Vec<f64>]) -> String {
    let mut out = headers().join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = generate(50, &RngPlan::new(1));
        assert_eq!(a, generate(50, &RngPlan::new(1)));
        assert_ne!(a, generate(50, &RngPlan::new(2)));
        assert!(a.iter().all(|r| r.len() == N_VARIABLES + 1));
        assert!(a.iter().all(|r| r[..N_VARIABLES].iter().all(|x| (0.0..1.0).contains(x))));
        assert!(to_csv(&a).starts_with("x1,x2,x3,x4,x5,x6,y\n"));
    }
}
