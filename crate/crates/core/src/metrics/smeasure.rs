//! Structure measure: object-aware and region-aware similarity.

use super::{binarize_gt, check_dims, EPS};
use crate::error::Result;

const ALPHA: f64 = 0.5;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    // Sample standard deviation; a single value has none.
    let std = if n > 1 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}

fn s_object(pred: &[f64], mask: &[bool]) -> f64 {
    let (x, sigma, n) = mean_std(pred.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p));
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object(pred: &[f64], gt: &[bool]) -> f64 {
    let u = gt.iter().filter(|&&b| b).count() as f64 / gt.len() as f64;
    let fg: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| if g { p } else { 0.0 }).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).map(|(&p, &g)| if g { 0.0 } else { 1.0 - p }).collect();
    let not_gt: Vec<bool> = gt.iter().map(|b| !b).collect();
    u * s_object(&fg, gt) + (1.0 - u) * s_object(&bg, &not_gt)
}

/// 1-based centroid `(x, y)` of the foreground, rounded half to even; the
/// image center when there is no foreground.
pub fn centroid(gt: &[bool], w: usize, h: usize) -> (usize, usize) {
    let area = gt.iter().filter(|&&b| b).count();
    let (x, y) = if area == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if gt[r * w + c] {
                    sx += c as f64;
                    sy += r as f64;
                }
            }
        }
        ((sx / area as f64).round_ties_even(), (sy / area as f64).round_ties_even())
    };
    (x as usize + 1, y as usize + 1)
}

/// SSIM-style similarity of one region; empty regions score 0 (they carry
/// zero weight).
fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = pred.iter().sum::<f64>() / nf;
    let y = gt.iter().sum::<f64>() / nf;
    let denom = if n > 1 { nf - 1.0 } else { 1.0 };
    let sx = pred.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / denom;
    let sy = gt.iter().map(|g| (g - y) * (g - y)).sum::<f64>() / denom;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn crop(m: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        out.extend_from_slice(&m[r * w + cols.start..r * w + cols.end]);
    }
    out
}

fn region(pred: &[f64], gt: &[bool], w: usize, h: usize) -> f64 {
    let (x, y) = centroid(gt, w, h);
    let (x, y) = (x.min(w), y.min(h));
    let gtf: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    let area = (w * h) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [(0..y, 0..x, w1), (0..y, x..w, w2), (y..h, 0..x, w3), (y..h, x..w, w4)];
    quads
        .into_iter()
        .map(|(rows, cols, wt)| {
            let p = crop(pred, w, rows.clone(), cols.clone());
            let g = crop(&gtf, w, rows, cols);
            wt * ssim(&p, &g)
        })
        .sum()
}

/// `0.5 * object + 0.5 * region` on the raw prediction, with the usual
/// closed forms for all-background and all-foreground ground truth.
pub fn s_measure(pred: &[f64], gt: &[f64], w: usize, h: usize) -> Result<f64> {
    check_dims(pred, gt, w, h)?;
    let g = binarize_gt(gt);
    let y = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    let s = if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        (ALPHA * object(pred, &g) + (1.0 - ALPHA) * region(pred, &g, w, h)).max(0.0)
    };
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                ((2..6).contains(&r) && (1..5).contains(&c)) as u8 as f64
            })
            .collect()
    }

    #[test]
    fn perfect_is_one() {
        let gt = square(8, 8);
        let s = s_measure(&gt, &gt, 8, 8).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn uniform_mean_is_below_one() {
        let gt = square(8, 8);
        let m = gt.iter().sum::<f64>() / 64.0;
        assert!(s_measure(&vec![m; 64], &gt, 8, 8).unwrap() < 1.0);
    }

    #[test]
    fn degenerate_ground_truth() {
        assert_eq!(s_measure(&[0.25; 4], &[0.0; 4], 2, 2).unwrap(), 0.75);
        assert_eq!(s_measure(&[0.25; 4], &[1.0; 4], 2, 2).unwrap(), 0.25);
    }

    #[test]
    fn centroid_rounds_half_to_even() {
        // Foreground columns 0..=4 on one row: mean column 2.0; rows 0..=1: mean row 0.5 -> 0.
        let mut gt = vec![false; 10 * 4];
        for r in 0..2 {
            for c in 0..5 {
                gt[r * 10 + c] = true;
            }
        }
        assert_eq!(centroid(&gt, 10, 4), (3, 1));
    }
}
