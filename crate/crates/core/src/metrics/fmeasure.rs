//! MAE and the 256-threshold precision / recall / F-measure sweep.

use super::{binarize_gt, check_lengths, min_max_normalize, THRESHOLDS};
use crate::error::{Error, Result};

/// `beta^2` of the F-measure.
pub const BETA2: f64 = 0.3;

/// Mean absolute error on raw values.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Precision, recall and F at each threshold `t = 0..255`.
#[derive(Debug, Clone, PartialEq)]
pub struct FCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    pub f_max: f64,
    pub f_mean: f64,
}

impl FCurve {
    /// Builds the curve summary from per-threshold arrays.
    pub fn from_arrays(precision: Vec<f64>, recall: Vec<f64>, f: Vec<f64>) -> Self {
        let f_max = f.iter().cloned().fold(0.0, f64::max);
        let f_mean = f.iter().sum::<f64>() / f.len().max(1) as f64;
        Self {
            precision,
            recall,
            f,
            f_max,
            f_mean,
        }
    }
}

/// `(1 + b2) P R / (b2 P + R)`, zero when the denominator vanishes.
pub fn f_beta(p: f64, r: f64) -> f64 {
    let den = BETA2 * p + r;
    if den > 0.0 {
        (1.0 + BETA2) * p * r / den
    } else {
        0.0
    }
}

/// 8-bit level of a min-max normalized prediction.
pub fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Threshold sweep on the min-max normalized, 8-bit quantized
/// prediction: a pixel is positive at threshold `t` when its level
/// exceeds `t`. Precision is 1 when nothing is predicted positive.
/// Fails when the ground truth has no positives.
pub fn f_measure_curve(pred: &[f64], gt: &[f64]) -> Result<FCurve> {
    check_lengths(pred, gt)?;
    let g = binarize_gt(gt);
    let positives = g.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(Error::Eval("ground truth has no positive pixels".into()));
    }
    let norm = min_max_normalize(pred);
    // Histograms of quantized levels over foreground and background.
    let mut fg = [0usize; THRESHOLDS];
    let mut bg = [0usize; THRESHOLDS];
    for (&p, &b) in norm.iter().zip(&g) {
        let q = quantize(p) as usize;
        if b {
            fg[q] += 1;
        } else {
            bg[q] += 1;
        }
    }
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let mut f = vec![0.0; THRESHOLDS];
    // Levels strictly above t; accumulate from the top.
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..THRESHOLDS).rev() {
        if t + 1 < THRESHOLDS {
            tp += fg[t + 1];
            fp += bg[t + 1];
        }
        let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = tp as f64 / positives as f64;
        precision[t] = p;
        recall[t] = r;
        f[t] = f_beta(p, r);
    }
    Ok(FCurve::from_arrays(precision, recall, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(mae(&[1.0; 3], &[0.0; 3]).unwrap(), 1.0);
        assert!(mae(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let c = f_measure_curve(&gt, &gt).unwrap();
        assert_eq!(c.f_max, 1.0);
        assert!(c.f_max >= c.f_mean);
    }

    #[test]
    fn uniform_half_prediction() {
        let gt: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let c = f_measure_curve(&[0.5; 16], &gt).unwrap();
        let expected = 1.3 * 0.5 / (0.3 * 0.5 + 1.0);
        assert!((c.f_max - expected).abs() < 1e-12);
        assert!((c.f[127] - expected).abs() < 1e-12);
        assert_eq!(c.f[128], 0.0);
        assert_eq!(c.precision[200], 1.0);
    }

    #[test]
    fn empty_gt_is_flagged() {
        assert!(f_measure_curve(&[0.3, 0.2], &[0.0, 0.0]).is_err());
    }
}
