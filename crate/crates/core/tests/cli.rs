use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pivotmerge::analysis::read_csv_matrix;
use pivotmerge::scores::layer_weights;
use pivotmerge::tensorstore::{load_checkpoint, read_container};

fn pivotmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivotmerge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    let out = pivotmerge(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn expert(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("expert_{i:02}.ckpt"))
}

#[test]
fn rho_out_of_range_is_a_usage_error() {
    let out = pivotmerge(&[
        "merge", "--method", "pivot", "--base", "b.ckpt", "--expert", "e.ckpt", "--out", "o.ckpt",
        "--rho", "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rho"));
}

#[test]
fn pivot_without_scores_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--experts", "2"]);
    let out = pivotmerge(&[
        "merge",
        "--method",
        "pivot",
        "--base",
        p(&tmp.path().join("base.ckpt")),
        "--expert",
        p(&expert(tmp.path(), 0)),
        "--out",
        p(&tmp.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scores"));
}

#[test]
fn missing_input_is_a_computation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pivotmerge(&[
        "merge",
        "--method",
        "average",
        "--base",
        p(&tmp.path().join("absent.ckpt")),
        "--expert",
        p(&tmp.path().join("absent2.ckpt")),
        "--out",
        p(&tmp.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn average_of_one_expert_is_that_expert() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--experts", "1"]);
    let merged = tmp.path().join("m.ckpt");
    let out = pivotmerge(&[
        "merge",
        "--method",
        "average",
        "--base",
        p(&tmp.path().join("base.ckpt")),
        "--expert",
        p(&expert(tmp.path(), 0)),
        "--out",
        p(&merged),
    ]);
    assert!(out.status.success());
    let got = load_checkpoint(&merged).unwrap();
    let want = load_checkpoint(expert(tmp.path(), 0)).unwrap();
    assert_eq!(got.layers, want.layers);
}

#[test]
fn every_method_runs_and_pivot_writes_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, &["--experts", "3", "--dims", "8x4,6x8"]);
    for method in ["average", "task-arithmetic", "ties", "dare-ties", "pivot"] {
        let merged = d.join(format!("{method}.ckpt"));
        let diag = d.join(format!("{method}.json"));
        let out = pivotmerge(&[
            "merge",
            "--method",
            method,
            "--base",
            p(&d.join("base.ckpt")),
            "--expert",
            p(&expert(d, 2)),
            "--expert",
            p(&expert(d, 0)),
            "--expert",
            p(&expert(d, 1)),
            "--scores",
            p(&d.join("scores.json")),
            "--diagnostics",
            p(&diag),
            "--out",
            p(&merged),
        ]);
        assert!(
            out.status.success(),
            "{method}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        load_checkpoint(&merged).unwrap();
        assert_eq!(diag.exists(), method == "pivot");
    }
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("pivot.json")).unwrap()).unwrap();
    assert_eq!(
        v["experts"],
        serde_json::json!(["expert_00", "expert_01", "expert_02"])
    );
    assert_eq!(v["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn synth_is_reproducible_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &["--seed", "7"]);
    synth(&b, &["--seed", "7"]);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "base.ckpt",
            "expert_00.ckpt",
            "expert_01.ckpt",
            "expert_02.ckpt",
            "expert_03.ckpt",
            "expert_04.ckpt",
            "ground_truth.ckpt",
            "scores.json",
            "spec.json"
        ]
    );
    for name in &names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
        if name.ends_with(".ckpt") && name != "ground_truth.ckpt" {
            load_checkpoint(a.join(name)).unwrap();
        }
    }
    assert_eq!(
        read_container(a.join("ground_truth.ckpt")).unwrap().len(),
        2
    );
}

#[test]
fn synth_with_one_expert() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--experts", "1"]);
    assert!(expert(tmp.path(), 0).exists());
    assert!(!expert(tmp.path(), 1).exists());
}

#[test]
fn residual_similarity_of_identical_experts_is_all_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, &["--experts", "1"]);
    let copy = d.join("copy.ckpt");
    fs::copy(expert(d, 0), &copy).unwrap();
    let out_dir = d.join("report");
    let out = pivotmerge(&[
        "analyze",
        "--mode",
        "residual-sim",
        "--rank",
        "2",
        "--base",
        p(&d.join("base.ckpt")),
        "--expert",
        p(&expert(d, 0)),
        "--expert",
        p(&copy),
        "--out",
        p(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = read_csv_matrix(out_dir.join("residual_similarity_before.csv")).unwrap();
    assert_eq!(m.values.shape(), (2, 2));
    assert!(
        m.values.iter().all(|&x| (x - 1.0).abs() < 1e-12),
        "{}",
        m.values
    );
}

#[test]
fn principal_angles_emit_raw_and_filtered() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, &["--experts", "3"]);
    let out_dir = d.join("report");
    let mut args = vec![
        "analyze".to_string(),
        "--mode".into(),
        "principal-angles".into(),
        "--rank".into(),
        "4".into(),
        "--base".into(),
        p(&d.join("base.ckpt")).into(),
        "--out".into(),
        p(&out_dir).into(),
    ];
    for i in 0..3 {
        args.push("--expert".into());
        args.push(p(&expert(d, i)).into());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(pivotmerge(&refs).status.success());
    for name in ["principal_angles_raw.csv", "principal_angles_filtered.csv"] {
        let m = read_csv_matrix(out_dir.join(name)).unwrap();
        assert_eq!(m.values.shape(), (3, 3));
        assert_eq!(m.row_labels, ["expert_00", "expert_01", "expert_02"]);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["angle_raw_mean"].is_number());
    assert!(summary["angle_filtered_mean"].is_number());
}

#[test]
fn layer_weights_match_the_softmax() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, &["--experts", "2", "--dims", "4x3,2x4"]);
    fs::write(
        d.join("scores.json"),
        r#"{"beta": 0.05, "experts": [{"id": "expert_00", "scores": [0.1, 0.4]}, {"id": "expert_01", "scores": [0.0, 0.45]}]}"#,
    )
    .unwrap();
    let out_dir = d.join("report");
    let out = pivotmerge(&[
        "analyze",
        "--mode",
        "layer-weights",
        "--base",
        p(&d.join("base.ckpt")),
        "--expert",
        p(&expert(d, 0)),
        "--expert",
        p(&expert(d, 1)),
        "--scores",
        p(&d.join("scores.json")),
        "--out",
        p(&out_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = read_csv_matrix(out_dir.join("layer_weights.csv")).unwrap();
    let want = layer_weights(&[vec![0.1, 0.3], vec![0.0, 0.45]], 0.05).unwrap();
    assert_eq!(m.col_labels, ["layer.1", "layer.2"]);
    assert!((m.values[(0, 0)] - 0.8808).abs() < 1e-4);
    for (x, y) in m.values.iter().zip(want.alpha.iter()) {
        assert!((x - y).abs() <= 1e-15);
    }
}
