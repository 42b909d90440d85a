//! Enhanced-alignment measure averaged over 256 thresholds.

use super::{binarize_gt, check_lengths, min_max_normalize, EPS, THRESHOLDS};
use crate::error::Result;

/// Threshold `t` of the sweep on the normalized prediction: a pixel is
/// foreground when its value exceeds `t / 256`.
pub fn e_threshold(t: usize) -> f64 {
    t as f64 / 256.0
}

/// Enhanced-alignment score of a binary prediction given as counts:
/// `fg_fg` predicted foreground on true foreground, `fg_bg` predicted
/// foreground on background, out of `n` pixels with `gt_fg` positives.
pub fn e_score_counts(fg_fg: usize, fg_bg: usize, gt_fg: usize, n: usize) -> f64 {
    let pred_fg = fg_fg + fg_bg;
    let pred_bg = n - pred_fg;
    let sum = if gt_fg == 0 {
        pred_bg as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let bg_fg = gt_fg - fg_fg;
        let bg_bg = pred_bg - bg_fg;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let (pf, pb) = (1.0 - mp, -mp);
        let (gf, gb) = (1.0 - mg, -mg);
        [(fg_fg, pf, gf), (fg_bg, pf, gb), (bg_fg, pb, gf), (bg_bg, pb, gb)]
            .into_iter()
            .map(|(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                count as f64 * (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    sum / n as f64
}

/// Per-threshold scores on the min-max normalized prediction.
pub fn e_curve(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    let g = binarize_gt(gt);
    let norm = min_max_normalize(pred);
    let n = g.len();
    let gt_fg = g.iter().filter(|&&b| b).count();
    // Sort once and walk thresholds upward.
    let mut fg_vals: Vec<f64> = norm.iter().zip(&g).filter(|(_, &b)| b).map(|(&p, _)| p).collect();
    let mut bg_vals: Vec<f64> = norm.iter().zip(&g).filter(|(_, &b)| !b).map(|(&p, _)| p).collect();
    fg_vals.sort_by(f64::total_cmp);
    bg_vals.sort_by(f64::total_cmp);
    let above = |vals: &[f64], t: f64| vals.len() - vals.partition_point(|&v| v <= t);
    Ok((0..THRESHOLDS)
        .map(|t| {
            let th = e_threshold(t);
            e_score_counts(above(&fg_vals, th), above(&bg_vals, th), gt_fg, n)
        })
        .collect())
}

/// Mean enhanced-alignment score over the threshold sweep.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let curve = e_curve(pred, gt)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}
