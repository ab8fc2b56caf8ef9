//! Per-variable stacking on a random training/validation split, with a sweep
//! over the weight-sum constraint `m`.
//!
//! Each explanatory variable gets its own univariate model: a data-driven
//! orthonormal basis in that variable, truncated at its selected dimension
//! and fitted by least squares. The training leave-one-out predictions of the
//! variable models are stacked under `sum w = m` for every `m` in the grid,
//! and each weight vector is scored by its summed squared validation error.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::basis::{search_basis, BasisSearchConfig, BasisSearchResult, BasisSet, Generator, SelectKind};
use crate::error::{Error, Result};
use crate::io::{parse_grid, Table};
use crate::kernels::KernelSpec;
use crate::loocv::{assemble_loo_matrix, fit_linear, loo_linear, loo_refit, FoldPlan, Predictor};
use crate::rng::{RngPlan, SPLIT};
use crate::solver::{solve_sum_to_m, solve_unconstrained};
use crate::types::{Dataset, WeightSolution};

/// Pipeline settings. Keys of [`PipelineConfig::from_settings`] are given in
/// brackets.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Response column name or 0-based index [`response`].
    pub response: String,
    /// Training share of the rows [`split`].
    pub split: f64,
    /// Candidate basis size [`J`].
    pub j: usize,
    /// [`generator`, `kernel`, `noise`].
    pub generator: Generator,
    /// [`m-grid`], as `lo:hi:count`.
    pub m_grid: Vec<f64>,
    /// Permutations of the sequential criterion [`K`].
    pub permutations: usize,
    /// [`restarts`].
    pub restarts: usize,
    /// [`select`].
    pub select: SelectKind,
    /// [`seed`]; there is no default.
    pub seed: u64,
    /// Block size of the held-out predictions [`k`].
    pub k: usize,
}

pub const DEFAULT_KERNEL: &str = "rbf:0.5";
pub const DEFAULT_NOISE: f64 = 0.1;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_settings(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: idx + 1,
            message: format!("expected key = value, found '{line}'"),
        })?;
        out.insert(key.trim().trim_start_matches("--").to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn flag_error(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::invalid(format!("invalid value '{value}' for --{key}: {why}"))
}

fn setting<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: Option<T>) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        Some(v) => v.parse().map_err(|e| flag_error(key, v, e)),
        None => default.ok_or_else(|| Error::invalid(format!("missing required --{key}"))),
    }
}

/// Generator from `generator`, `kernel` and `noise` settings.
pub fn generator_from_settings(map: &BTreeMap<String, String>) -> Result<Generator> {
    let name = map.get("generator").map(String::as_str).unwrap_or("nw");
    match name {
        "nw" => Ok(Generator::NadarayaWatson),
        "gp" => {
            let kernel = map.get("kernel").map(String::as_str).unwrap_or(DEFAULT_KERNEL);
            let noise: f64 = setting(map, "noise", Some(DEFAULT_NOISE))?;
            let spec = KernelSpec::parse(kernel, noise).map_err(|e| flag_error("kernel", kernel, e))?;
            Ok(Generator::GaussianProcess(spec))
        }
        other => Err(flag_error("generator", other, "expected nw or gp")),
    }
}

/// The `m` grid from the `m-grid` setting (default `0.5:1.5:41`).
pub fn m_grid_from_settings(map: &BTreeMap<String, String>) -> Result<Vec<f64>> {
    let spec = map.get("m-grid").map(String::as_str).unwrap_or("0.5:1.5:41");
    let grid = parse_grid(spec).map_err(|e| flag_error("m-grid", spec, e))?;
    if grid.contains(&0.0) {
        return Err(Error::ZeroConstraint);
    }
    Ok(grid)
}

impl PipelineConfig {
    pub fn new(response: &str, seed: u64) -> Self {
        PipelineConfig {
            response: response.to_string(),
            split: 0.5,
            j: 10,
            generator: Generator::NadarayaWatson,
            m_grid: parse_grid("0.5:1.5:41").expect("valid default grid"),
            permutations: 5,
            restarts: 5,
            select: SelectKind::Cv,
            seed,
            k: 1,
        }
    }

    /// Builds a configuration from string settings; `response` and `seed`
    /// are required.
    pub fn from_settings(map: &BTreeMap<String, String>) -> Result<Self> {
        let response = map
            .get("response")
            .cloned()
            .ok_or_else(|| Error::invalid("missing required --response"))?;
        let select = match map.get("select").map(String::as_str).unwrap_or("cv") {
            "cv" => SelectKind::Cv,
            "sequential" => SelectKind::Sequential,
            other => return Err(flag_error("select", other, "expected sequential or cv")),
        };
        let config = PipelineConfig {
            response,
            split: setting(map, "split", Some(0.5))?,
            j: setting(map, "J", Some(10))?,
            generator: generator_from_settings(map)?,
            m_grid: m_grid_from_settings(map)?,
            permutations: setting(map, "K", Some(5))?,
            restarts: setting(map, "restarts", Some(5))?,
            select,
            seed: setting(map, "seed", None)?,
            k: setting(map, "k", Some(1))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(flag_error("split", &self.split.to_string(), "must lie in (0, 1)"));
        }
        if self.j == 0 {
            return Err(flag_error("J", "0", "must be at least 1"));
        }
        if self.m_grid.is_empty() {
            return Err(flag_error("m-grid", "", "grid is empty"));
        }
        if self.m_grid.contains(&0.0) {
            return Err(Error::ZeroConstraint);
        }
        if self.restarts == 0 {
            return Err(flag_error("restarts", "0", "must be at least 1"));
        }
        if self.permutations == 0 {
            return Err(flag_error("K", "0", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(flag_error("k", "0", "must be at least 1"));
        }
        Ok(())
    }

    fn search_config(&self) -> BasisSearchConfig {
        let mut c = BasisSearchConfig::new(self.j, self.generator);
        c.restarts = self.restarts;
        c.select = self.select;
        c.permutations = self.permutations;
        c
    }
}

/// The fitted model of one explanatory variable.
#[derive(Debug, Clone)]
pub struct VariableFit {
    pub name: String,
    pub j_opt: usize,
    /// Selection score of every truncation `1..=J`.
    pub scores: Vec<f64>,
    /// The selected `j_opt` basis elements.
    pub basis: BasisSet,
    pub coef: DVector<f64>,
    /// Held-out training predictions.
    pub loo: DVector<f64>,
    /// Predictions at the validation rows.
    pub validation: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub m: f64,
    /// Summed squared validation error.
    pub error: f64,
    /// Training stacking objective.
    pub train_q: f64,
    pub w: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub variables: Vec<String>,
    pub j_opt: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Index of the smallest validation error (ties to the first).
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.error < self.rows[best].error {
                best = i;
            }
        }
        best
    }

    pub fn m_opt(&self) -> &SweepRow {
        &self.rows[self.argmin()]
    }

    /// Whether the minimum lies strictly inside the grid.
    pub fn has_interior_minimum(&self) -> bool {
        let i = self.argmin();
        i > 0 && i + 1 < self.rows.len()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub sweep: SweepResult,
    pub variables: Vec<VariableFit>,
    /// Unconstrained stacking weights on the training predictions.
    pub unconstrained: WeightSolution,
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

/// Least squares without intercept on rows that are already design rows.
struct Linear {
    design_cols: usize,
}

impl crate::loocv::Fitter for Linear {
    fn fit(&self, data: &Dataset) -> Result<Box<dyn Predictor>> {
        let design = DMatrix::from_row_slice(data.n(), self.design_cols, data.points());
        let coef = fit_linear(&design, &data.y_vector())?.coef;
        Ok(Box::new(move |x: &[f64]| x.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>()))
    }
}

/// Held-out predictions of a no-intercept least-squares fit on `design`.
fn held_out(design: &DMatrix<f64>, y: &DVector<f64>, k: usize, plan: &RngPlan) -> Result<DVector<f64>> {
    let fit = fit_linear(design, y)?;
    if k == 1 {
        return loo_linear(&fit, y);
    }
    let n = design.nrows();
    let rows: Vec<f64> = (0..n).flat_map(|i| design.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let data = Dataset::from_rows(rows, y.iter().copied().collect(), design.ncols())?;
    let folds = FoldPlan::leave_k_out(n, k, plan)?;
    loo_refit(
        &Linear {
            design_cols: design.ncols(),
        },
        &data,
        &folds,
    )
}

fn standardize(train: &[f64]) -> (f64, f64) {
    let n = train.len() as f64;
    let mean = train.iter().sum::<f64>() / n;
    let sd = (train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

fn fit_variable(
    config: &PipelineConfig,
    name: &str,
    x: &[f64],
    y: &[f64],
    train: &[usize],
    validation: &[usize],
    plan: &RngPlan,
) -> Result<VariableFit> {
    let x_train: Vec<f64> = train.iter().map(|&i| x[i]).collect();
    let (mean, sd) = standardize(&x_train);
    let scaled: Vec<f64> = x_train.iter().map(|v| (v - mean) / sd).collect();
    let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let data = Dataset::univariate(&scaled, &y_train)?;
    let search = search_basis(&data, &config.search_config(), plan)?;
    let basis = search.basis_opt.truncated(search.j_opt);
    let y_vec = data.y_vector();
    let coef = fit_linear(basis.evals(), &y_vec)?.coef;
    let loo = held_out(basis.evals(), &y_vec, config.k, plan)?;
    let validation = DVector::from_iterator(
        validation.len(),
        validation.iter().map(|&i| {
            let e = basis.eval_all(&[(x[i] - mean) / sd]);
            e.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>()
        }),
    );
    Ok(VariableFit {
        name: name.to_string(),
        j_opt: search.j_opt,
        scores: search.scores,
        basis,
        coef,
        loo,
        validation,
    })
}

/// Seeded training/validation split; both parts sorted.
pub fn split_rows(n: usize, share: f64, plan: &RngPlan) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut plan.substream(SPLIT, 0).rng());
    let n_train = ((n as f64) * share).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    (train, validation)
}

/// Response values plus the names and values of every other column.
pub fn split_columns(table: &Table, response: &str) -> Result<(Vec<f64>, Vec<String>, Vec<Vec<f64>>)> {
    if table.headers.len() < 2 {
        return Err(Error::invalid("need a response and at least one explanatory column"));
    }
    let r = table.column_index(response)?;
    let y = table.numeric_column(r)?;
    let keep: Vec<usize> = (0..table.headers.len()).filter(|&c| c != r).collect();
    let names = keep.iter().map(|&c| table.headers[c].clone()).collect();
    let columns = keep.iter().map(|&c| table.numeric_column(c)).collect::<Result<_>>()?;
    Ok((y, names, columns))
}

/// Basis search for every explanatory variable on all rows, with the same
/// per-variable standardization and substreams as [`run_pipeline`].
pub fn generate_variable_bases(config: &PipelineConfig, table: &Table) -> Result<Vec<(String, BasisSearchResult)>> {
    config.validate()?;
    let (y, names, columns) = split_columns(table, &config.response)?;
    let plan = RngPlan::new(config.seed);
    names
        .par_iter()
        .zip(columns.par_iter())
        .enumerate()
        .map(|(v, (name, x))| {
            let (mean, sd) = standardize(x);
            let scaled: Vec<f64> = x.iter().map(|t| (t - mean) / sd).collect();
            let data = Dataset::univariate(&scaled, &y)?;
            let result = search_basis(&data, &config.search_config(), &plan.substream("variable", v as u64))
                .map_err(|e| e.for_variable(name))?;
            Ok((name.clone(), result))
        })
        .collect()
}

/// Runs the whole pipeline on `table`.
pub fn run_pipeline(config: &PipelineConfig, table: &Table) -> Result<PipelineOutput> {
    config.validate()?;
    let (y, names, columns) = split_columns(table, &config.response)?;
    let plan = RngPlan::new(config.seed);
    let (train, validation) = split_rows(y.len(), config.split, &plan);
    if train.len() <= config.j + 1 || validation.is_empty() {
        return Err(Error::invalid(format!(
            "split leaves {} training and {} validation rows; need more than J+1={} training rows and at least one validation row",
            train.len(),
            validation.len(),
            config.j + 1
        )));
    }
    let variables: Vec<VariableFit> = names
        .par_iter()
        .zip(columns.par_iter())
        .enumerate()
        .map(|(v, (name, x))| {
            fit_variable(config, name, x, &y, &train, &validation, &plan.substream("variable", v as u64))
                .map_err(|e| e.for_variable(name))
        })
        .collect::<Result<_>>()?;

    let loo = assemble_loo_matrix(&variables.iter().map(|v| v.loo.clone()).collect::<Vec<_>>(), config.k)?;
    let y_train = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
    let y_val = DVector::from_iterator(validation.len(), validation.iter().map(|&i| y[i]));
    let val_preds = DMatrix::from_columns(&variables.iter().map(|v| v.validation.clone()).collect::<Vec<_>>());
    let unconstrained = solve_unconstrained(&loo, &y_train)?;
    let rows: Vec<SweepRow> = config
        .m_grid
        .par_iter()
        .map(|&m| {
            let sol = solve_sum_to_m(&loo, &y_train, m)?;
            let resid = &y_val - &val_preds * &sol.w;
            Ok(SweepRow {
                m,
                error: resid.norm_squared(),
                train_q: sol.q,
                w: sol.w,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PipelineOutput {
        sweep: SweepResult {
            variables: names,
            j_opt: variables.iter().map(|v| v.j_opt).collect(),
            rows,
        },
        variables,
        unconstrained,
        train_rows: train,
        validation_rows: validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_file_and_validation() {
        let map = parse_settings("response = y # target\nseed=3\nJ = 4\n\nm-grid = 0.8:1.2:5\n").unwrap();
        let c = PipelineConfig::from_settings(&map).unwrap();
        assert_eq!((c.j, c.seed, c.m_grid.len()), (4, 3, 5));
        assert_eq!(c.generator, Generator::NadarayaWatson);

        let mut bad = map.clone();
        bad.insert("J".into(), "ten".into());
        let msg = PipelineConfig::from_settings(&bad).unwrap_err().to_string();
        assert!(msg.contains("--J"), "{msg}");

        let mut no_seed = map.clone();
        no_seed.remove("seed");
        assert!(PipelineConfig::from_settings(&no_seed).unwrap_err().to_string().contains("--seed"));

        let mut zero = map.clone();
        zero.insert("m-grid".into(), "-1:1:3".into());
        assert_eq!(PipelineConfig::from_settings(&zero).unwrap_err(), Error::ZeroConstraint);

        let mut gp = map;
        gp.insert("generator".into(), "gp".into());
        gp.insert("kernel".into(), "poly:2,1".into());
        assert!(matches!(
            PipelineConfig::from_settings(&gp).unwrap().generator,
            Generator::GaussianProcess(_)
        ));
        assert!(parse_settings("no equals sign").is_err());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let plan = RngPlan::new(9);
        let (a, b) = split_rows(11, 0.5, &plan);
        assert_eq!(a.len() + b.len(), 11);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!((a.clone(), b), split_rows(11, 0.5, &plan));
        assert_ne!(a, split_rows(11, 0.5, &RngPlan::new(10)).0);
    }

    #[test]
    fn held_out_linear_agrees_across_k() {
        let design = DMatrix::from_fn(12, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.3 });
        let y = DVector::from_fn(12, |i, _| (i as f64).sin());
        let plan = RngPlan::new(1);
        let one = held_out(&design, &y, 1, &plan).unwrap();
        let blocks = FoldPlan::leave_one_out(12);
        let rows: Vec<f64> = (0..12).flat_map(|i| vec![design[(i, 0)], design[(i, 1)]]).collect();
        let data = Dataset::from_rows(rows, y.iter().copied().collect(), 2).unwrap();
        let refit = loo_refit(
            &Linear { design_cols: 2 },
            &data,
            &blocks,
        )
        .unwrap();
        assert!((one - refit).amax() < 1e-10);
        assert_eq!(held_out(&design, &y, 3, &plan).unwrap().len(), 12);
    }

    #[test]
    fn missing_response_and_small_split() {
        let table = Table::parse("a,b\n1,2\n3,4\n5,6\n", ',').unwrap();
        let mut c = PipelineConfig::new("y", 1);
        let msg = run_pipeline(&c, &table).unwrap_err().to_string();
        assert!(msg.contains("a, b"), "{msg}");
        c.response = "b".into();
        let msg = run_pipeline(&c, &table).unwrap_err().to_string();
        assert!(msg.contains("training rows"), "{msg}");
    }
}
