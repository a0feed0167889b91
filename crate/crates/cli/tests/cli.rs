use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clear-audit"));
    c.env("CLEAR_AUDIT_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn clear-audit")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn prepare(dir: &Path, n: usize, epochs: usize) {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--n", &n.to_string(), "--seed", "7", "--out", d]);
    ok(&["preprocess", "--dir", d, "--seed", "7"]);
    ok(&["pretrain", "--dir", d, "--seed", "7", "--epochs", &epochs.to_string()]);
    ok(&["embed", "--dir", d]);
}

#[test]
fn full_pipeline_produces_a_parseable_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    ok(&["synth", "--n", "5000", "--seed", "7", "--out", d]);
    ok(&["preprocess", "--dir", d]);
    ok(&["pretrain", "--dir", d]);
    ok(&["embed", "--dir", d]);
    let out = ok(&["audit", "--dir", d]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("flagged"));
    assert!(data.join("audit_report.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("audit_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_audited"], 5000);

    ok(&["report", "--dir", d]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["detection"]["n_noisy"], 250);
    let history = std::fs::read_to_string(data.join("pretrain_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 16);
}

#[test]
fn neighbors_prints_k_lines_in_distance_order() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path(), 500, 2);
    let out = ok(&["neighbors", "--dir", tmp.path().to_str().unwrap(), "--id", "B042", "--k", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    let mut last = 0.0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        assert_ne!(fields[0], "B042");
        assert!(fields[1].parse::<clear_core::tabular::BerLevel>().is_ok());
        let d: f64 = fields[2].parse().unwrap();
        assert!(d >= last);
        last = d;
    }
}

#[test]
fn explicit_pretrain_defaults_match_implicit_ones() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path(), 300, 15);
    let d = tmp.path().to_str().unwrap();
    let implicit = std::fs::read(tmp.path().join("encoder.json")).unwrap();
    ok(&[
        "pretrain", "--dir", d, "--seed", "7", "--epochs", "15", "--batch-size", "16", "--lr", "0.001",
        "--corruption", "0.3",
    ]);
    assert_eq!(std::fs::read(tmp.path().join("encoder.json")).unwrap(), implicit);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        prepare(dir, 400, 2);
        ok(&["audit", "--dir", dir.to_str().unwrap()]);
    }
    for f in ["embeddings.csv", "audit_report.csv", "encoder.json", "split.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // Re-running replaces outputs rather than appending.
    let before = std::fs::read(a.path().join("audit_report.csv")).unwrap();
    ok(&["audit", "--dir", a.path().to_str().unwrap()]);
    assert_eq!(std::fs::read(a.path().join("audit_report.csv")).unwrap(), before);
}

#[test]
fn config_file_sits_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path(), 200, 1);
    let d = tmp.path().to_str().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"audit": {"k": 3}}"#).unwrap();
    let neighbours_in_report = || {
        let text = std::fs::read_to_string(tmp.path().join("audit_report.csv")).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rec = rdr.records().next().unwrap().unwrap();
        rec[4].split(';').count()
    };
    ok(&["audit", "--dir", d, "--config", cfg.to_str().unwrap()]);
    assert_eq!(neighbours_in_report(), 3);
    ok(&["audit", "--dir", d, "--config", cfg.to_str().unwrap(), "--k", "5"]);
    assert_eq!(neighbours_in_report(), 5);
}

#[test]
fn usage_errors_exit_1() {
    let out = run(&["audit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(run(&["preprocess", "--dir", d]).status.code(), Some(2));
    prepare(tmp.path(), 100, 1);
    let out = run(&["neighbors", "--dir", d, "--id", "B9999"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("B9999"));
    assert_eq!(run(&["synth", "--n", "5", "--out", d]).status.code(), Some(2));
}

#[test]
fn feature_selection_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path(), 400, 1);
    let d = tmp.path().to_str().unwrap();
    let exclude = tmp.path().join("exclude.txt");
    std::fs::write(&exclude, "# leakage\nwall_u\n").unwrap();
    ok(&[
        "select-features", "--dir", d, "--top", "5", "--n-trees", "10", "--exclude", exclude.to_str().unwrap(),
    ]);
    let kept = std::fs::read_to_string(tmp.path().join("selected_features.txt")).unwrap();
    assert_eq!(kept.lines().count(), 5);
    assert!(!kept.lines().any(|l| l == "wall_u"));
    let schema = clear_core::tabular::FeatureSchema::load(&tmp.path().join("schema_selected.json")).unwrap();
    assert!(schema.group_key_index().is_some());

    ok(&["baseline", "--dir", d, "--epochs", "2"]);
    ok(&["baseline", "--dir", d, "--model", "forest", "--granularity", "fine"]);
    for f in ["eval_mlp_fine.json", "eval_mlp_coarse.json", "eval_forest_fine.json", "confusion_mlp_fine.csv"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval_mlp_coarse.json")).unwrap()).unwrap();
    let total: u64 = eval["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 40);

    ok(&["project", "--dir", d]);
    let proj = std::fs::read_to_string(tmp.path().join("projection.csv")).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "id,p0,p1,label");
    assert_eq!(run(&["project", "--dir", d, "--components", "4"]).status.code(), Some(1));
}
