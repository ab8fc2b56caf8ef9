use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use stacking::pipeline::{SweepResult, SweepRow};
use stacking::plot::{companion_tsv, emit_plot};

fn stacking(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stacking")).args(args).output().unwrap()
}

fn data() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/synthetic_additive.csv")
        .to_string_lossy()
        .into_owned()
}

#[test]
fn gen_basis_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(run.to_string());
        let out = stacking(&[
            "gen-basis", "--data", &data(), "--response", "y", "--J", "3", "--restarts", "1", "--seed", "7",
            "--out-dir", dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(dir.join("basis_x1.tsv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn verify_bayes_defaults_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stacking(&["verify-bayes", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gaps = fs::read_to_string(tmp.path().join("gaps.tsv")).unwrap();
    assert!(gaps.starts_with("loss\tpredictor\tn\trep\tgap"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let missing = stacking(&["run", "--data", &data(), "--response", "y"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--seed"));
    let unknown = stacking(&["run", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    let zero = stacking(&["run", "--data", &data(), "--seed", "1", "--m-grid=-1:1:3"]);
    assert_eq!(zero.status.code(), Some(1));
}

fn sweep(rows: usize) -> SweepResult {
    SweepResult {
        variables: vec!["x".into()],
        j_opt: vec![2],
        rows: (0..rows)
            .map(|i| {
                let m = 0.5 + 0.025 * i as f64;
                SweepRow { m, error: (m - 1.0).powi(2), train_q: 0.0, w: nalgebra::DVector::from_element(1, m) }
            })
            .collect(),
    }
}

#[test]
fn plot_writes_companion_table() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("plot.svg");
    emit_plot(&sweep(41), &path).unwrap();
    assert_eq!(fs::read_to_string(companion_tsv(&path)).unwrap().lines().count(), 42);
    assert!(emit_plot(&sweep(1), &tmp.path().join("one.svg")).is_err());
}
