use std::path::Path;
use std::process::{Command, Output};

fn dualkf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualkf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_fit_score_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dualkf(&["generate", "--out", "gt", "--nodes", "4", "--horizon", "300", "--seed", "2"], d));
    for f in ["model.json", "h.csv", "q.csv", "r.csv", "states.csv", "measurements.csv", "simulation.json"] {
        assert!(d.join("gt").join(f).exists(), "{f} missing");
    }
    ok(&dualkf(&["fit", "--data", "gt", "--out", "bp", "--iterations", "50"], d));
    assert!(d.join("bp/loss.csv").exists());
    ok(&dualkf(&["fit", "--data", "gt", "--out", "jekf", "--method", "jekf"], d));
    assert!(d.join("jekf/states.csv").exists());
    let out = dualkf(&["score", "--data", "gt", "--model", "bp/model.json", "--horizon", "100"], d);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["param_corr"].as_f64().unwrap().abs() <= 1.0);
    assert!(report["state_mse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn campaign_counts_rows_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{"sizes": [3, 4], "replicates": 1, "simulation": {"horizon": 400},
                  "train": {"n_iterations": 30}, "joint": {"horizon": 100}, "crossval_horizon": 50}"#;
    std::fs::write(d.join("c.json"), cfg).unwrap();
    ok(&dualkf(&["campaign", "--config", "c.json", "--out", "res", "--jobs", "2"], d));
    let cards = std::fs::read_to_string(d.join("res/scorecards.csv")).unwrap();
    // provenance line, header, then 2 sizes × 1 replicate × 3 methods
    assert_eq!(cards.lines().count(), 2 + 6);
    assert!(cards.starts_with("# config_hash="));
    ok(&dualkf(&["plot-data", "--results", "res"], d));
    assert!(d.join("res/summary.csv").exists());
    assert!(d.join("res/trace.csv").exists());
}

#[test]
fn campaign_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dualkf(
        &["campaign", "--sizes", "3", "--replicates", "1", "--methods", "bp", "--iterations", "20", "--out", "res", "--seed", "4"],
        d,
    );
    ok(&out);
    let cards = std::fs::read_to_string(d.join("res/scorecards.csv")).unwrap();
    assert_eq!(cards.lines().count(), 3);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("res/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["master_seed"], 4);
    assert_eq!(cfg["methods"], serde_json::json!(["bp"]));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dualkf(&["campaign", "--methods", "pf", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(dualkf(&["campaign", "--sizes", "0", "--out", "x"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), "{\"unknown\": 1}").unwrap();
    assert_eq!(dualkf(&["campaign", "--config", "bad.json"], d).status.code(), Some(2));
    assert_eq!(dualkf(&["frobnicate"], d).status.code(), Some(2));
}

#[test]
fn plot_data_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualkf(&["plot-data", "--results", "."], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs"));
}
