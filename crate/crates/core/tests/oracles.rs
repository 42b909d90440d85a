//! Metrics and edge modules against independent straight-line references.

mod common;

use common::oracle_suite::{self, TOL};

#[test]
fn mae_matches_reference() {
    let diff = oracle_suite::mae_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn f_curve_matches_reference() {
    let diff = oracle_suite::f_curve_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn s_measure_matches_reference() {
    let diff = oracle_suite::s_measure_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn e_measure_matches_reference() {
    let diff = oracle_suite::e_measure_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn weighted_f_matches_reference() {
    let diff = oracle_suite::weighted_f_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn edge_enhance_matches_reference() {
    let diff = oracle_suite::edge_enhance_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}

#[test]
fn meem_matches_reference() {
    let diff = oracle_suite::meem_diff();
    assert!(diff < TOL, "max abs diff {diff:e}");
}
