//! Pivot merge against frozen outputs of the numpy reference in `tests/oracle/`.

use std::fs;
use std::path::PathBuf;

use pivotmerge::operators::{MergeKind, MergeOperator};
use pivotmerge::pivot::{pivot_merge, PivotConfig};
use pivotmerge::scores::read_scores;
use pivotmerge::tensorstore::{encode_container, load_checkpoint, DType, ProjectorCheckpoint};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/pivot")
        .join(name)
}

fn experts() -> Vec<ProjectorCheckpoint> {
    // deliberately out of id order
    ["expert_c", "expert_a", "expert_b"]
        .iter()
        .map(|id| load_checkpoint(fixture(&format!("{id}.ckpt"))).unwrap())
        .collect()
}

fn max_relative_error(got: &ProjectorCheckpoint, want: &ProjectorCheckpoint) -> f64 {
    got.layers
        .iter()
        .zip(&want.layers)
        .map(|(g, w)| {
            let dw = (&g.weight - &w.weight).norm() / w.weight.norm();
            let db = (g.bias.as_ref().unwrap() - w.bias.as_ref().unwrap()).norm()
                / w.bias.as_ref().unwrap().norm();
            dw.max(db)
        })
        .fold(0.0, f64::max)
}

fn check(config: PivotConfig, expected: &str) {
    let base = load_checkpoint(fixture("base.ckpt")).unwrap();
    let scores = read_scores(fixture("scores.json")).unwrap();
    let config = PivotConfig {
        beta: scores.beta,
        ..config
    };
    let (merged, _) = pivot_merge(&experts(), &base, &scores, &config).unwrap();
    let want = load_checkpoint(fixture(expected)).unwrap();
    let err = max_relative_error(&merged, &want);
    assert!(err <= 1e-8, "{expected}: relative error {err:.3e}");
}

#[test]
fn ties_in_magnitude_space_matches_reference() {
    check(
        PivotConfig {
            rank: 3,
            ..PivotConfig::default()
        },
        "expected_ties.ckpt",
    );
}

#[test]
fn average_in_coefficient_space_matches_reference() {
    check(
        PivotConfig {
            rank: 2,
            inner: MergeOperator::new(MergeKind::WeightAverage),
            magnitude_space: Some(false),
            ..PivotConfig::default()
        },
        "expected_average.ckpt",
    );
}

#[test]
fn reference_containers_reencode_to_identical_bytes() {
    let path = fixture("base.ckpt");
    let ckpt = load_checkpoint(&path).unwrap();
    let bytes = encode_container(&ckpt.to_tensors(DType::F64)).unwrap();
    assert_eq!(bytes, fs::read(&path).unwrap());
}
