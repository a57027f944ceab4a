use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mlgem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlgem"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

const SMALL: &str = r#"{"schema_version": 1, "scenario": {"architecture": "I", "p": 8, "n": 150, "K": 3, "m": 3, "seed": 21}}"#;

fn simulated() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "sim.json", SMALL);
    let out = mlgem(
        d.path(),
        &["simulate", "--config", "sim.json", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    d
}

#[test]
fn simulate_is_reproducible_and_carries_provenance() {
    let d = simulated();
    let again = mlgem(
        d.path(),
        &["simulate", "--config", "sim.json", "--out", "again"],
    );
    assert_eq!(code(&again), 0);
    for f in [
        "data.csv",
        "data.json",
        "truth/layer_0.csv",
        "truth/layer_3.csv",
        "truth/edges.tsv",
        "truth/manifest.json",
    ] {
        assert_eq!(
            fs::read(d.path().join("run").join(f)).unwrap(),
            fs::read(d.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = json(d.path().join("run/data.json"));
    assert_eq!(manifest["K"], 3);
    assert_eq!(manifest["layout"], "categories-contiguous");
    assert_eq!(manifest["provenance"]["seed"], 21);
    assert_eq!(
        manifest["provenance"]["config_hash"]
            .as_str()
            .unwrap()
            .len(),
        64
    );

    let other = mlgem(
        d.path(),
        &[
            "simulate", "--config", "sim.json", "--out", "other", "--seed", "22",
        ],
    );
    assert_eq!(code(&other), 0);
    assert_ne!(
        fs::read(d.path().join("run/data.csv")).unwrap(),
        fs::read(d.path().join("other/data.csv")).unwrap()
    );
}

#[test]
fn invalid_configs_exit_with_validation_code() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "k1.json",
        r#"{"schema_version": 1, "scenario": {"architecture": "I", "p": 8, "n": 50, "K": 1}}"#,
    );
    let out = mlgem(d.path(), &["simulate", "--config", "k1.json", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("identifiable"), "{}", stderr(&out));
    assert!(!d.path().join("x").exists());

    write(
        d.path(),
        "extra.json",
        "{\"schema_version\": 1,\n \"scenario\": {\"architecture\": \"I\", \"p\": 8, \"n\": 50, \"K\": 3},\n \"colour\": 1}",
    );
    let out = mlgem(
        d.path(),
        &["simulate", "--config", "extra.json", "--out", "x"],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("colour") && stderr(&out).contains("line 3"),
        "{}",
        stderr(&out)
    );

    write(
        d.path(),
        "v2.json",
        r#"{"schema_version": 2, "scenario": {}}"#,
    );
    assert_eq!(
        code(&mlgem(
            d.path(),
            &["simulate", "--config", "v2.json", "--out", "x"]
        )),
        2
    );
    assert_eq!(
        code(&mlgem(
            d.path(),
            &["simulate", "--config", "absent.json", "--out", "x"]
        )),
        4
    );
}

#[test]
fn missing_data_leaves_no_outputs() {
    let d = tempfile::tempdir().unwrap();
    let out = mlgem(
        d.path(),
        &[
            "fit", "--data", "nope.csv", "--lambda", "0.1", "--out", "est",
        ],
    );
    assert_eq!(code(&out), 4);
    assert!(!d.path().join("est").exists());
}

#[test]
fn malformed_data_names_the_line() {
    let d = simulated();
    let run = d.path().join("run");
    let text = fs::read_to_string(run.join("data.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[4] = lines[4].replacen(|c: char| c.is_ascii_digit(), "q", 1);
    fs::write(run.join("data.csv"), lines.join("\n")).unwrap();
    let out = mlgem(
        d.path(),
        &[
            "fit",
            "--data",
            "run/data.csv",
            "--lambda",
            "0.1",
            "--out",
            "est",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 5"), "{}", stderr(&out));
}

#[test]
fn em_from_onestep_does_not_lower_the_objective() {
    let d = simulated();
    let one = mlgem(
        d.path(),
        &[
            "fit",
            "--data",
            "run/data.csv",
            "--method",
            "onestep",
            "--lambda",
            "0.1",
            "--out",
            "one",
        ],
    );
    assert_eq!(code(&one), 0, "{}", stderr(&one));
    let em = mlgem(
        d.path(),
        &[
            "fit",
            "--data",
            "run/data.csv",
            "--method",
            "em",
            "--lambda",
            "0.1",
            "--init",
            "one",
            "--out",
            "em",
            "--format",
            "json",
        ],
    );
    assert_eq!(code(&em), 0, "{}", stderr(&em));
    let printed: Value = serde_json::from_slice(&em.stdout).unwrap();
    let manifest = json(d.path().join("em/manifest.json"));
    assert_eq!(printed, manifest);
    let one_obj = json(d.path().join("one/manifest.json"))["objective_trace"][0]
        .as_f64()
        .unwrap();
    let trace: Vec<f64> = manifest["objective_trace"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(*trace.last().unwrap() >= one_obj);
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    assert_eq!(manifest["method"], "em");
    assert_eq!(manifest["converged"], true);
    assert!(d.path().join("em/edges.tsv").exists());
}

#[test]
fn non_convergence_exits_three_and_keeps_the_trace() {
    let d = simulated();
    let out = mlgem(
        d.path(),
        &[
            "fit",
            "--data",
            "run/data.csv",
            "--lambda1",
            "0.05",
            "--lambda2",
            "0.1",
            "--max-iter",
            "2",
            "--delta",
            "1e-12",
            "--out",
            "est",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let manifest = json(d.path().join("est/manifest.json"));
    assert_eq!(manifest["converged"], false);
    assert_eq!(manifest["iterations"], 2);
    assert_eq!(manifest["objective_trace"].as_array().unwrap().len(), 2);
}

#[test]
fn evaluate_truth_against_itself_is_zero() {
    let d = simulated();
    let out = mlgem(
        d.path(),
        &[
            "evaluate",
            "--truth",
            "run/truth",
            "--estimate",
            "run/truth",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    let row = rows.records().next().unwrap().unwrap();
    for name in [
        "entropy_loss",
        "frobenius_loss",
        "fp_rate",
        "fn_rate",
        "hamming",
    ] {
        let i = header.iter().position(|h| h == name).unwrap();
        let v: f64 = row[i].parse().unwrap();
        assert!(v.abs() < 1e-10, "{name} = {v}");
    }
    assert!(header.iter().any(|h| h == "config_hash"));
}

#[test]
fn select_writes_scores_for_every_grid_point() {
    let d = simulated();
    write(
        d.path(),
        "grid.json",
        r#"{"schema_version": 1, "lambda1_values": [0.05, 0.2], "lambda2_values": [0.05, 0.1, 0.3]}"#,
    );
    for criterion in ["ebic", "cv"] {
        let out_dir = format!("sel-{criterion}");
        let out = mlgem(
            d.path(),
            &[
                "select",
                "--data",
                "run/data.csv",
                "--method",
                "onestep",
                "--criterion",
                criterion,
                "--grid",
                "grid.json",
                "--folds",
                "3",
                "--out",
                &out_dir,
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let scores = fs::read_to_string(d.path().join(&out_dir).join("scores.csv")).unwrap();
        assert_eq!(scores.lines().count(), 7);
        let manifest = json(d.path().join(&out_dir).join("manifest.json"));
        let chosen = &manifest["selection"]["chosen"];
        assert_eq!(manifest["lambda1"], chosen["lambda1"]);
    }
}

#[test]
fn sigma0_test_on_data_without_systemic_layer() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "null.json",
        r#"{"schema_version": 1, "scenario": {"architecture": "II", "p": 6, "n": 120, "K": 3, "m": 2, "seed": 5, "systemic": false}}"#,
    );
    assert_eq!(
        code(&mlgem(
            d.path(),
            &["simulate", "--config", "null.json", "--out", "run"]
        )),
        0
    );
    let out = mlgem(
        d.path(),
        &[
            "test",
            "--data",
            "run/data.csv",
            "--test",
            "sigma0",
            "--seed",
            "1",
            "--out",
            "t.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(d.path().join("t.json"));
    assert!(report["p_value"].as_f64().unwrap() > 0.05);
    assert_eq!(report["null_draws"].as_array().unwrap().len(), 199);
    assert_eq!(report["provenance"]["seed"], 1);
    let bad = mlgem(
        d.path(),
        &[
            "test",
            "--data",
            "run/data.csv",
            "--test",
            "sigma0",
            "--draws",
            "10",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn roc_and_table_outputs_are_tidy() {
    let d = tempfile::tempdir().unwrap();
    write(
        d.path(),
        "roc.json",
        r#"{"schema_version": 1, "scenario": {"architecture": "II", "p": 8, "n": 100, "K": 2, "m": 2, "seed": 3},
            "replicates": 2, "lambda_min": 0.05, "lambda_max": 0.5, "points": 4, "methods": ["em", "onestep"]}"#,
    );
    let out = mlgem(
        d.path(),
        &["roc", "--config", "roc.json", "--out", "roc", "--jobs", "2"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let auc = fs::read_to_string(d.path().join("roc/auc.csv")).unwrap();
    assert_eq!(auc.lines().count(), 1 + 2 * 2);
    let roc = fs::read_to_string(d.path().join("roc/roc.csv")).unwrap();
    assert_eq!(roc.lines().count(), 1 + 2 * 2 * 4);

    write(
        d.path(),
        "t1.json",
        r#"{"schema_version": 1, "scenario": {"architecture": "I", "p": 8, "n": 100, "K": 2, "m": 2, "seed": 3},
            "replicates": 2, "methods": ["onestep"], "criteria": [{"kind": "ebic"}, {"kind": "cv", "folds": 2}],
            "grid": {"lambda1_values": [0.1, 0.3], "lambda2_values": [0.1, 0.3]}}"#,
    );
    let out = mlgem(
        d.path(),
        &["repro-table1", "--config", "t1.json", "--out", "t1"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(d.path().join("t1/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let summary = fs::read_to_string(d.path().join("t1/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    assert!(String::from_utf8(out.stdout).unwrap().contains("EL"));
}
