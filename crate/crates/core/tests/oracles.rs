mod common;

use common::*;

const TRIALS: u64 = 200;

#[test]
fn nms_and_finalize_match_exhaustive_search() {
    run_trials("nms", TRIALS, 1, nms_trial).unwrap();
}

#[test]
fn matching_matches_reference() {
    run_trials("matching", TRIALS, 2, matching_trial).unwrap();
}

#[test]
fn ap_matches_reference() {
    run_trials("ap", TRIALS, 3, ap_trial).unwrap();
}

#[test]
fn ar_matches_reference() {
    run_trials("ar", TRIALS, 4, ar_trial).unwrap();
}

#[test]
fn ensemble_matches_reference() {
    run_trials("ensemble", TRIALS, 5, ensemble_trial).unwrap();
}

#[test]
fn evaluate_matches_reference() {
    run_trials("evaluate", TRIALS, 6, evaluate_trial).unwrap();
}

#[test]
fn oracle_self_checks() {
    use vild::detection::BBox;
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
    assert!((oracle_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    // 1 TP then 1 FP against 2 GT: precision 1 up to recall 0.5
    assert!((oracle_ap(&[true, false], 2).unwrap() - 51.0 / 101.0).abs() < 1e-15);
    assert_eq!(oracle_ap(&[], 0), None);
}
