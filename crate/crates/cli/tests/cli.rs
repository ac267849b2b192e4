use std::path::Path;
use std::process::{Command, Output};

fn vsmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsmc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("y.csv");
    std::fs::write(&csv, "y1\n0.3\n-1.2\n0.8\n").unwrap();
    let o = vsmc(&["oracle", "scalar_lgssm", path(&csv), "--set", "a=0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: f64 = stdout(&o).trim().parse().unwrap();
    let data = vsmc::experiments::load_matrix_csv(&csv).unwrap();
    let m = vsmc::models::LgssmModel::scalar(0.9, 1.0, 1.0, 1.0).unwrap();
    assert_eq!(got, vsmc::models::lgssm_log_marginal(&m, &data).unwrap());
}

#[test]
fn malformed_csv_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("y.csv");
    std::fs::write(&csv, "y1\n0.3\nabc\n").unwrap();
    let o = vsmc(&["oracle", "scalar_lgssm", path(&csv)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains('3'), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("y.csv");
    std::fs::write(&csv, "y1\n0.3\n").unwrap();
    assert_eq!(vsmc(&["oracle", "stochvol", path(&csv)]).status.code(), Some(2));
    assert_eq!(vsmc(&["oracle", "scalar_lgssm", path(&dir.path().join("missing.csv"))]).status.code(), Some(2));
    assert_eq!(vsmc(&["gradcheck", "scalar_mean_shift", "stochvol"]).status.code(), Some(2));
    assert_eq!(vsmc(&["gradcheck", "nope", "lgssm"]).status.code(), Some(2));
    assert_eq!(vsmc(&["frobnicate"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "experiment = vis_bimodal\nalpha = 0.3\n").unwrap();
    assert_eq!(vsmc(&["run", path(&cfg)]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = vsmc(&["gradcheck", "prior_tilted", "stochvol", "--configs", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("vis.txt");
    std::fs::write(&cfg, format!("experiment = vis_bimodal\noutput = {}\n", out.display())).unwrap();
    let o = vsmc(&["run", path(&cfg), "--set", "iterations=50", "--set", "samples=2000", "--set", "eval_seeds=20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "summary.csv", "trace.csv", "samples.csv", "density.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let written = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("iterations = 50"), "{written}");
    assert!(stdout(&o).contains("tv_histogram"));
}
