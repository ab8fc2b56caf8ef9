//! Stacking with sum-to-m constraints, data-driven orthonormal bases and a
//! simulator comparing leave-one-out risk with posterior risk.

pub mod basis;
pub mod bayes;
pub mod commands;
pub mod error;
pub mod features;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod loocv;
pub mod objective;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod solver;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
pub use objective::{empirical_inner_product, stacking_error};
pub use rng::RngPlan;
pub use types::{ConstraintSpec, Dataset, LooMatrix, WeightSolution};
