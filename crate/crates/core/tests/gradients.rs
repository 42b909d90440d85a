//! Analytic gradients of the model's building blocks against central
//! finite differences.

mod common;

use common::grad_suite::{self, TOL};

#[test]
fn lmsa_forward_gradients() {
    let err = grad_suite::lmsa_forward_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn transformer_layer_gradients() {
    let err = grad_suite::transformer_layer_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn fuse_gradients() {
    let err = grad_suite::fuse_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn edge_enhance_gradients() {
    let err = grad_suite::edge_enhance_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn meem_gradients() {
    let err = grad_suite::meem_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn dem_forward_gradients() {
    let err = grad_suite::dem_forward_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn loss_gradients() {
    let err = grad_suite::loss_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}

#[test]
fn total_loss_gradients() {
    let err = grad_suite::total_loss_gradients();
    assert!(err < TOL, "max rel err {err:e}");
}
