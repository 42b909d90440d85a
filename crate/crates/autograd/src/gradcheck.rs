//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function on a no-grad
//! graph, so it is independent of every backward rule it validates.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input agreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Relative error of one entry. Entries much smaller than the largest
/// gradient in the same input are compared against `floor_frac` of that
/// scale, so round-off on near-zero entries does not dominate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64, floor_frac: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor_frac * scale).max(1e-300);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step` for every entry of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Vec<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let analytic: Vec<Tensor> = {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&graph, &vars);
        assert_eq!(out.value().numel(), 1, "gradcheck needs a scalar output");
        let grads = graph.backward(&out);
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };
    let eval = |perturbed: &[Tensor]| -> f64 {
        let graph = Graph::no_grad();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| graph.constant(t.clone())).collect();
        f(&graph, &vars).value().item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            work[idx].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[idx].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[idx].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic[idx].data();
        let scale = a.iter().chain(&numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&av, &nv) in a.iter().zip(&numeric) {
            max_abs = max_abs.max((av - nv).abs());
            max_rel = max_rel.max(relative_error(av, nv, scale, 1e-3));
        }
        reports.push(GradCheck {
            input: idx,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            numeric_norm: numeric.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    reports
}

/// Largest relative error across all inputs of a report.
pub fn worst(reports: &[GradCheck]) -> f64 {
    reports.iter().fold(0.0_f64, |m, r| m.max(r.max_rel_err))
}
