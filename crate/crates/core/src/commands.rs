//! Subcommand bodies behind the `stacking` binary. Each takes string
//! settings (config file entries overridden by flags) and writes its tables
//! under an output directory, returning a short human-readable summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::bayes::{convergence_experiment, ExperimentConfig, LossSpec, PredictorKind};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::io::{format_float, Table, Tsv};
use crate::loocv::{assemble_loo_matrix, fit_linear, loo_linear, loo_refit, FeatureFitter, FoldPlan};
use crate::pipeline::{
    generate_variable_bases, m_grid_from_settings, parse_settings, run_pipeline, split_columns, PipelineConfig,
    SweepResult, SweepRow,
};
use crate::plot::emit_plot;
use crate::rng::RngPlan;
use crate::solver::solve_sum_to_m;
use crate::synthetic;
use crate::types::{Dataset, LooMatrix};

pub type Settings = BTreeMap<String, String>;

/// Entries of the optional `config` file, overridden by `flags`.
pub fn merge_settings(flags: Settings) -> Result<Settings> {
    let mut merged = match flags.get("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{path}: {e}")))?;
            parse_settings(&text)?
        }
        None => Settings::new(),
    };
    merged.extend(flags);
    Ok(merged)
}

fn get<'a>(s: &'a Settings, key: &str) -> Result<&'a str> {
    s.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::invalid(format!("missing required --{key}")))
}

fn parsed<T: std::str::FromStr>(s: &Settings, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match s.get(key) {
        Some(v) => v
            .parse()
            .map_err(|e| Error::invalid(format!("invalid value '{v}' for --{key}: {e}"))),
        None => Ok(default),
    }
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.get("out-dir").map(String::as_str).unwrap_or("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn read_table(s: &Settings, key: &str) -> Result<Table> {
    Table::read(Path::new(get(s, key)?))
}

/// File-name-safe version of a column name.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn sweep_table(sweep: &SweepResult) -> Tsv {
    let mut header = vec!["m".to_string(), "error".to_string()];
    header.extend((1..=sweep.variables.len()).map(|j| format!("w_{j}")));
    let mut t = Tsv::new(&header);
    for r in &sweep.rows {
        let mut v = vec![r.m, r.error];
        v.extend(r.w.iter());
        t.push_floats(&v);
    }
    t
}

fn basis_table(evals: &DMatrix<f64>, j: usize) -> Tsv {
    let mut t = Tsv::new(&(1..=j).map(|c| format!("e_{c}")).collect::<Vec<_>>());
    for i in 0..evals.nrows() {
        t.push_floats(&evals.row(i).iter().take(j).copied().collect::<Vec<_>>());
    }
    t
}

fn describe_optimum(out: &mut String, sweep: &SweepResult) {
    let best = sweep.m_opt();
    let _ = writeln!(out, "m_opt\t{}", format_float(best.m));
    let _ = writeln!(out, "error\t{}", format_float(best.error));
    for (name, w) in sweep.variables.iter().zip(best.w.iter()) {
        let _ = writeln!(out, "w[{name}]\t{}", format_float(*w));
    }
}

/// The full per-variable pipeline: `sweep.tsv`, `basis_<var>.tsv`, `plot.svg`
/// and `plot.tsv`.
pub fn cmd_run(settings: &Settings) -> Result<String> {
    let config = PipelineConfig::from_settings(settings)?;
    let table = read_table(settings, "data")?;
    let dir = out_dir(settings)?;
    let output = run_pipeline(&config, &table)?;
    sweep_table(&output.sweep).write(&dir.join("sweep.tsv"))?;
    for v in &output.variables {
        basis_table(v.basis.evals(), v.j_opt).write(&dir.join(format!("basis_{}.tsv", file_stem(&v.name))))?;
    }
    emit_plot(&output.sweep, &dir.join("plot.svg"))?;
    let mut out = String::new();
    for (name, j) in output.sweep.variables.iter().zip(&output.sweep.j_opt) {
        let _ = writeln!(out, "j_opt[{name}]\t{j}");
    }
    describe_optimum(&mut out, &output.sweep);
    let _ = writeln!(out, "unconstrained_sum\t{}", format_float(output.unconstrained.w.sum()));
    Ok(out)
}

/// Basis search per explanatory variable on all rows: `basis_<var>.tsv`.
pub fn cmd_gen_basis(settings: &Settings) -> Result<String> {
    let config = PipelineConfig::from_settings(settings)?;
    let table = read_table(settings, "data")?;
    let dir = out_dir(settings)?;
    let mut out = String::new();
    for (name, result) in generate_variable_bases(&config, &table)? {
        basis_table(result.basis_opt.evals(), result.j_opt).write(&dir.join(format!("basis_{}.tsv", file_stem(&name))))?;
        let _ = writeln!(out, "j_opt[{name}]\t{}", result.j_opt);
    }
    Ok(out)
}

/// Held-out predictions of a univariate polynomial model per explanatory
/// variable: `loo.tsv` with the response first.
pub fn cmd_loo(settings: &Settings) -> Result<String> {
    let table = read_table(settings, "data")?;
    let response = get(settings, "response")?;
    let degree: usize = parsed(settings, "degree", 3)?;
    let k: usize = parsed(settings, "k", 1)?;
    let (y, names, columns) = split_columns(&table, response)?;
    let features = FeatureMap::Polynomial(degree);
    let y_vec = DVector::from_column_slice(&y);
    let mut preds = Vec::with_capacity(columns.len());
    for (name, x) in names.iter().zip(&columns) {
        let data = Dataset::univariate(x, &y).map_err(|e| e.for_variable(name))?;
        let column = if k == 1 {
            fit_linear(&features.design(&data), &y_vec)
                .and_then(|fit| loo_linear(&fit, &y_vec))
                .map_err(|e| e.for_variable(name))?
        } else {
            get(settings, "seed")?;
            let seed: u64 = parsed(settings, "seed", 0)?;
            let folds = FoldPlan::leave_k_out(y.len(), k, &RngPlan::new(seed))?;
            loo_refit(&FeatureFitter(features), &data, &folds).map_err(|e| e.for_variable(name))?
        };
        preds.push(column);
    }
    let mut header = vec![table.headers[table.column_index(response)?].clone()];
    header.extend(names.iter().cloned());
    let mut t = Tsv::new(&header);
    for i in 0..y.len() {
        let mut row = vec![y[i]];
        row.extend(preds.iter().map(|p| p[i]));
        t.push_floats(&row);
    }
    let dir = out_dir(settings)?;
    t.write(&dir.join("loo.tsv"))?;
    Ok(format!("wrote {} rows x {} models\n", y.len(), names.len()))
}

/// Stacking weights and training objective over an `m` grid, from a file of
/// held-out predictions: `sweep.tsv`, `plot.svg`, `plot.tsv`.
pub fn cmd_sweep_m(settings: &Settings) -> Result<String> {
    let grid = m_grid_from_settings(settings)?;
    let table = read_table(settings, "loo")?;
    let response = settings.get("response").map(String::as_str).unwrap_or("y");
    let (y, names, columns) = split_columns(&table, response)?;
    let loo: LooMatrix = assemble_loo_matrix(
        &columns.iter().map(|c| DVector::from_column_slice(c)).collect::<Vec<_>>(),
        parsed(settings, "k", 1)?,
    )?;
    let y = DVector::from_column_slice(&y);
    let rows = grid
        .iter()
        .map(|&m| {
            let sol = solve_sum_to_m(&loo, &y, m)?;
            Ok(SweepRow {
                m,
                error: sol.q,
                train_q: sol.q,
                w: sol.w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sweep = SweepResult {
        variables: names,
        j_opt: vec![],
        rows,
    };
    let dir = out_dir(settings)?;
    sweep_table(&sweep).write(&dir.join("sweep.tsv"))?;
    if sweep.rows.len() >= 2 {
        emit_plot(&sweep, &dir.join("plot.svg"))?;
    }
    let mut out = String::new();
    describe_optimum(&mut out, &sweep);
    Ok(out)
}

fn list<T>(s: &Settings, key: &str, default: &str, parse: impl Fn(&str) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let v = s.get(key).map(String::as_str).unwrap_or(default);
    parse(v).map_err(|e| Error::invalid(format!("invalid value '{v}' for --{key}: {e}")))
}

/// Posterior-risk versus CV-risk gaps: `gaps.tsv` plus a summary table.
pub fn cmd_verify_bayes(settings: &Settings) -> Result<String> {
    let mut config = match settings.get("truth").map(String::as_str).unwrap_or("m-complete") {
        "m-complete" => ExperimentConfig::default_m_complete(),
        "inside" => ExperimentConfig::truth_inside(),
        other => {
            return Err(Error::invalid(format!(
                "invalid value '{other}' for --truth: expected m-complete or inside"
            )))
        }
    };
    config.reps = parsed(settings, "reps", config.reps)?;
    config.n_grid = list(settings, "n-grid", "50,200,800", |v| {
        v.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| Error::invalid(e.to_string())))
            .collect()
    })?;
    let losses = list(settings, "loss", "all", |v| match v {
        "all" => Ok(LossSpec::ALL.to_vec()),
        other => Ok(vec![LossSpec::parse(other)?]),
    })?;
    let kinds = list(settings, "predictor", "all", |v| match v {
        "all" => Ok(PredictorKind::ALL.to_vec()),
        "bayes" => Ok(vec![PredictorKind::Bayes]),
        "plugin" => Ok(vec![PredictorKind::Plugin]),
        _ => Err(Error::invalid("expected all, bayes or plugin")),
    })?;
    let plan = RngPlan::new(parsed(settings, "seed", 0)?);
    let mut gaps = Tsv::new(&["loss", "predictor", "n", "rep", "gap"]);
    let mut summary = Tsv::new(&["loss", "predictor", "n", "median", "p90", "rms"]);
    for &loss in &losses {
        for &kind in &kinds {
            let report = convergence_experiment(&config, loss, kind, &plan)?;
            for (i, &n) in report.n_grid.iter().enumerate() {
                for (r, g) in report.gaps[i].iter().enumerate() {
                    gaps.push_cells([
                        loss.name().to_string(),
                        kind.name().to_string(),
                        n.to_string(),
                        r.to_string(),
                        format_float(*g),
                    ]);
                }
                summary.push_cells([
                    loss.name().to_string(),
                    kind.name().to_string(),
                    n.to_string(),
                    format!("{:.6}", report.median(i)),
                    format!("{:.6}", report.p90(i)),
                    format!("{:.6}", report.rms(i)),
                ]);
            }
        }
    }
    gaps.write(&out_dir(settings)?.join("gaps.tsv"))?;
    Ok(summary.as_str().to_string())
}

/// Writes the synthetic additive dataset as CSV.
pub fn cmd_synth(settings: &Settings) -> Result<String> {
    let n: usize = parsed(settings, "n", 1000)?;
    let seed: u64 = parsed(settings, "seed", synthetic::DEFAULT_SEED)?;
    let path = get(settings, "out")?;
    let rows = synthetic::generate(n, &RngPlan::new(seed));
    fs::write(path, synthetic::to_csv(&rows)).map_err(|e| Error::Io(format!("{path}: {e}")))?;
    Ok(format!("wrote {n} rows to {path}\n"))
}
