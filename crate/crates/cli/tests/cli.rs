use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn stgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn stgraph")
}

/// Runs a command that must succeed and returns its stdout summary.
fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = stgraph(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

/// Runs a command that must fail; returns the exit code and error object.
fn fail(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = stgraph(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("error line");
    (
        out.status.code().unwrap(),
        serde_json::from_str(last).expect("error is JSON"),
    )
}

#[test]
fn pipeline_happy_path_writes_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = ok(
        d,
        &[
            "synth",
            "--n-records",
            "600",
            "--out",
            "raw.csv",
            "--truth",
            "truth.csv",
        ],
    );
    assert_eq!(s["records"], 600);
    let s = ok(
        d,
        &[
            "ingest",
            "--input",
            "raw.csv",
            "--out",
            "rec.csv",
            "--report",
            "report.json",
        ],
    );
    assert_eq!(s["rows_rejected"], 0);
    assert_eq!(s["class_counts_after"][0], s["class_counts_after"][1]);
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rejected"].as_array().unwrap().len(), 0);

    let g = ok(
        d,
        &[
            "build-graph",
            "--input",
            "rec.csv",
            "--mode",
            "coarse",
            "--out",
            "coarse.json",
        ],
    );
    assert_eq!(g["features"], 423);
    let t = ok(
        d,
        &[
            "train",
            "--graph",
            "coarse.json",
            "--arch",
            "dstgcn",
            "--epochs",
            "10",
            "--out-dir",
            "run",
        ],
    );
    assert!(t["best_val_f1"].as_f64().unwrap() > 0.5);
    assert!(d.join("run/history.csv").exists());

    let e = ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.json",
            "--graph",
            "coarse.json",
            "--split",
            "test",
            "--out-dir",
            "eval",
        ],
    );
    let n_test = g["split"][2].as_u64().unwrap();
    assert_eq!(e["num_evaluated"].as_u64().unwrap(), n_test);
    let metrics: Value = serde_json::from_slice(&std::fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    let total: u64 = metrics["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(total, n_test);
    for f in ["roc.csv", "pr.csv"] {
        let text = std::fs::read_to_string(d.join("eval").join(f)).unwrap();
        assert!(text.lines().count() > 2, "{f}");
    }
}

#[test]
fn fine_graph_on_full_balanced_set_has_2352_nodes_and_389_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "raw.csv"]);
    let s = ok(d, &["ingest", "--input", "raw.csv", "--out", "rec.csv"]);
    assert_eq!(s["class_counts_after"], serde_json::json!([1176, 1176]));
    let g = ok(
        d,
        &[
            "build-graph",
            "--input",
            "rec.csv",
            "--mode",
            "fine",
            "--out",
            "fine.json",
        ],
    );
    assert_eq!(g["nodes"], 2352);
    assert_eq!(g["features"], 389);
}

#[test]
fn evaluate_rejects_checkpoint_with_other_feature_dim() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-records", "200", "--out", "rec.csv"]);
    ok(
        d,
        &[
            "build-graph",
            "--input",
            "rec.csv",
            "--mode",
            "coarse",
            "--out",
            "coarse.json",
        ],
    );
    ok(
        d,
        &[
            "build-graph",
            "--input",
            "rec.csv",
            "--mode",
            "fine",
            "--out",
            "fine.json",
        ],
    );
    ok(
        d,
        &["train", "--graph", "coarse.json", "--epochs", "2", "--out-dir", "run"],
    );
    let (code, err) = fail(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.json",
            "--graph",
            "fine.json",
            "--out-dir",
            "eval",
        ],
    );
    assert_eq!(code, 3);
    assert_eq!(err["error"]["category"], "data");
    assert!(err["error"]["message"].as_str().unwrap().contains("423"));
    assert!(!d.join("eval/metrics.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let (code, err) = fail(d, &["--config", "bad.toml", "synth", "--out", "x.csv"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["category"], "config");
    assert!(!d.join("x.csv").exists());

    let (code, _) = fail(d, &["synth", "--out", "x.csv", "--no-such-flag"]);
    assert_eq!(code, 2);
    let (code, _) = fail(
        d,
        &["build-graph", "--input", "x.csv", "--mode", "medium", "--out", "g.json"],
    );
    assert_eq!(code, 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "[synth]\nn_records = 100\nseed = 5\n").unwrap();
    let s = ok(d, &["--config", "c.toml", "synth", "--out", "a.csv"]);
    assert_eq!(s["records"], 100);
    let s = ok(
        d,
        &["--config", "c.toml", "synth", "--out", "b.csv", "--n-records", "60"],
    );
    assert_eq!(s["records"], 60);
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-records", "200", "--out", "rec.csv"]);
    ok(
        d,
        &[
            "build-graph",
            "--input",
            "rec.csv",
            "--mode",
            "coarse",
            "--out",
            "coarse.json",
        ],
    );
    let (code, err) = fail(
        d,
        &["train", "--graph", "coarse.json", "--lr", "1e300", "--out-dir", "run"],
    );
    assert_eq!(code, 4);
    assert_eq!(err["error"]["category"], "numeric");
    assert!(!d.join("run/checkpoint.json").exists());
}

#[test]
fn failed_command_removes_its_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-records", "100", "--out", "raw.csv"]);
    std::fs::create_dir(d.join("report.json")).unwrap();
    let (code, _) = fail(
        d,
        &[
            "ingest",
            "--input",
            "raw.csv",
            "--out",
            "rec.csv",
            "--report",
            "report.json",
        ],
    );
    assert_eq!(code, 3);
    assert!(!d.join("rec.csv").exists());
}

#[test]
fn malformed_rows_are_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-records", "100", "--out", "raw.csv"]);
    let mut text = std::fs::read_to_string(d.join("raw.csv")).unwrap();
    let line = text.lines().nth(1).unwrap().to_string();
    let broken = line.replacen(line.split(',').nth(1).unwrap(), "95.0", 1);
    text.push_str(&broken.replacen(line.split(',').next().unwrap(), "BAD-1", 1));
    text.push('\n');
    std::fs::write(d.join("raw.csv"), text).unwrap();
    let s = ok(d, &["ingest", "--input", "raw.csv", "--out", "rec.csv", "--no-balance"]);
    assert_eq!(s["rows_accepted"], 100);
    assert_eq!(s["rows_rejected"], 1);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        ok(d, &["synth", "--n-records", "300", "--out", &format!("raw_{tag}.csv")]);
        ok(
            d,
            &[
                "ingest",
                "--input",
                &format!("raw_{tag}.csv"),
                "--out",
                &format!("rec_{tag}.csv"),
            ],
        );
        ok(
            d,
            &[
                "build-graph",
                "--input",
                &format!("rec_{tag}.csv"),
                "--mode",
                "coarse",
                "--out",
                &format!("g_{tag}.json"),
            ],
        );
        ok(
            d,
            &[
                "grid-search",
                "--graph",
                &format!("g_{tag}.json"),
                "--epochs",
                "3",
                "--out",
                &format!("grid_{tag}.csv"),
            ],
        );
        ok(
            d,
            &[
                "train",
                "--graph",
                &format!("g_{tag}.json"),
                "--epochs",
                "5",
                "--out-dir",
                &format!("run_{tag}"),
            ],
        );
    }
    for f in [
        "raw_{}.csv",
        "rec_{}.csv",
        "g_{}.json",
        "grid_{}.csv",
        "run_{}/checkpoint.json",
        "run_{}/history.csv",
    ] {
        let a = std::fs::read(d.join(f.replace("{}", "a"))).unwrap();
        let b = std::fs::read(d.join(f.replace("{}", "b"))).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn compare_writes_one_row_per_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "[synth]\nn_records = 400\n").unwrap();
    let s = ok(
        d,
        &[
            "--config",
            "c.toml",
            "compare",
            "--epochs",
            "5",
            "--archs",
            "gcn,sage",
            "--out",
            "table.csv",
        ],
    );
    assert_eq!(s["rows"].as_array().unwrap().len(), 2);
    let table = std::fs::read_to_string(d.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "arch,fine_f1,coarse_f1");
    assert!(lines[1].starts_with("gcn,") && lines[2].starts_with("sage,"));
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let out = stgraph(Path::new("."), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "dist_km = 30.0",
        "window_h = 24.0",
        "resolution = 7",
        "hidden_dim = 32",
        "lr = 0.05",
        "epochs = 30",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}
