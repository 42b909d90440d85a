//! Saliency evaluation: MAE, F-measure sweep, S-measure, E-measure and
//! weighted F-measure, per image and aggregated over a dataset.
//!
//! Maps are row-major `[0, 1]` slices. Ground truth is binarized at 0.5.

mod emeasure;
mod fmeasure;
mod report;
mod smeasure;
mod weighted;

pub use emeasure::{e_curve, e_measure, e_score_counts, e_threshold};
pub use fmeasure::{f_beta, f_measure_curve, mae, quantize, FCurve, BETA2};
pub use report::{
    evaluate_dataset, evaluate_pairs, pair_from_tensors, read_curves_csv, read_report_csv, write_curves_csv, write_report_csv, Aggregate, Curves,
    EvalPair, ImageMetrics, MetricReport, AGGREGATE_ID,
};
pub use smeasure::{centroid, s_measure};
pub use weighted::{edt_with_indices, gaussian_kernel, weighted_f, WF_BETA2};

use crate::error::{Error, Result};

/// Number of thresholds in every sweep.
pub const THRESHOLDS: usize = 256;
/// Machine epsilon used as a stabilizer in ratios.
pub const EPS: f64 = f64::EPSILON;

pub(crate) fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Eval(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_dims(pred: &[f64], gt: &[f64], w: usize, h: usize) -> Result<()> {
    check_lengths(pred, gt)?;
    if pred.len() != w * h {
        return Err(Error::Eval(format!("{} pixels do not form a {w}x{h} map", pred.len())));
    }
    Ok(())
}

/// `g >= 0.5`.
pub fn binarize_gt(gt: &[f64]) -> Vec<bool> {
    gt.iter().map(|&g| g >= 0.5).collect()
}

/// Rescales to `[0, 1]` by the map's own range; constant maps are kept.
pub fn min_max_normalize(pred: &[f64]) -> Vec<f64> {
    let lo = pred.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        pred.iter().map(|p| (p - lo) / (hi - lo)).collect()
    } else {
        pred.to_vec()
    }
}
