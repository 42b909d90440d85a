#![allow(dead_code)]

use mdsam_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary(shape: &[usize], p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Fixed random projection of a tensor output to a scalar.
pub fn project<'g>(g: &'g Graph, out: &Var<'g>, seed: u64) -> Var<'g> {
    let w = uniform(out.shape(), -1.0, 1.0, seed);
    out.mul(&g.constant(w)).sum()
}
pub mod grad_suite;
pub mod oracle_suite;
