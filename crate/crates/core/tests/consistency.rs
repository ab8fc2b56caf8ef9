use rand::Rng;
use rand_distr::StandardNormal;

use stacking::bayes::{convergence_experiment, ExperimentConfig, LossSpec, PredictorKind};
use stacking::kernels::{default_bandwidth_grid, nw_fit, select_bandwidth_cv};
use stacking::{Dataset, RngPlan};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn truth(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

fn nw_rmse(n: usize, seed: u64) -> f64 {
    let mut rng = RngPlan::new(seed).substream("nw", n as u64).rng();
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x.iter().map(|&v| truth(v) + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let data = Dataset::univariate(&x, &y).unwrap();
    let bandwidth = select_bandwidth_cv(&data, &default_bandwidth_grid(&data)).unwrap();
    let fit = nw_fit(&data, bandwidth).unwrap();
    let grid = 400;
    let sse: f64 = (0..grid)
        .map(|i| {
            let t = (i as f64 + 0.5) / grid as f64;
            (fit.eval(&[t]) - truth(t)).powi(2)
        })
        .sum();
    (sse / grid as f64).sqrt()
}

#[test]
fn nadaraya_watson_error_shrinks_with_n() {
    let medians: Vec<f64> = [50, 200, 800]
        .iter()
        .map(|&n| median((0..10).map(|s| nw_rmse(n, s)).collect()))
        .collect();
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn bayes_and_plugin_agree_more_closely_with_n() {
    let config = ExperimentConfig::default_m_complete();
    let plan = RngPlan::new(11);
    for loss in LossSpec::ALL {
        let bayes = convergence_experiment(&config, loss, PredictorKind::Bayes, &plan).unwrap();
        let plugin = convergence_experiment(&config, loss, PredictorKind::Plugin, &plan).unwrap();
        let diff = |i: usize| (bayes.median(i) - plugin.median(i)).abs();
        let last = config.n_grid.len() - 1;
        assert!(diff(last) < 10.0 * diff(0).max(1e-12), "{loss:?}: {} vs {}", diff(last), diff(0));
    }
}

#[test]
fn gap_shrinks_for_other_seeds() {
    let config = ExperimentConfig::truth_inside();
    for seed in [1, 2, 3] {
        let report =
            convergence_experiment(&config, LossSpec::Squared, PredictorKind::Bayes, &RngPlan::new(seed)).unwrap();
        assert!(report.median(report.n_grid.len() - 1) < report.median(0), "seed {seed}");
    }
}
