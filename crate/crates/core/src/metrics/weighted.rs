//! Weighted F-measure with dependency- and location-weighted errors.

use super::{binarize_gt, check_dims, EPS};
use crate::error::Result;

/// `beta^2` of the weighted F-measure.
pub const WF_BETA2: f64 = 1.0;
const KERNEL: usize = 7;
const SIGMA: f64 = 5.0;

/// Exact Euclidean distance transform to the nearest `true` pixel.
///
/// Returns the squared distance and the flat index of the nearest feature
/// for every pixel. Among equidistant features the one in the smallest
/// column wins, then the one in the smallest row. Pixels with no feature
/// anywhere get `u64::MAX` and index `usize::MAX`.
pub fn edt_with_indices(feature: &[bool], w: usize, h: usize) -> (Vec<u64>, Vec<usize>) {
    const INF: u64 = u64::MAX;
    // Column pass: nearest feature row per pixel within its column.
    let mut col_d = vec![INF; w * h];
    let mut col_r = vec![usize::MAX; w * h];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if feature[r * w + c] {
                last = Some(r);
            }
            if let Some(lr) = last {
                col_d[r * w + c] = (r - lr) as u64;
                col_r[r * w + c] = lr;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if feature[r * w + c] {
                next = Some(r);
            }
            if let Some(nr) = next {
                let d = (nr - r) as u64;
                // Strictly closer only: ties keep the row above.
                if d < col_d[r * w + c] {
                    col_d[r * w + c] = d;
                    col_r[r * w + c] = nr;
                }
            }
        }
    }
    // Row pass: lower envelope of parabolas f(q) = g(q)^2 + (x - q)^2.
    let mut dist = vec![INF; w * h];
    let mut idx = vec![usize::MAX; w * h];
    let mut v = vec![0usize; w];
    // Breakpoints as exact fractions num / den (den > 0).
    let mut z: Vec<(i128, i128)> = vec![(0, 1); w + 1];
    for r in 0..h {
        let g = |q: usize| -> Option<i128> {
            let d = col_d[r * w + q];
            (d != INF).then(|| (d * d) as i128)
        };
        let cols: Vec<usize> = (0..w).filter(|&q| g(q).is_some()).collect();
        if cols.is_empty() {
            continue;
        }
        let mut k = 0usize;
        v[0] = cols[0];
        // z[k] = left boundary of v[k]'s region; z[k + 1] its right boundary.
        let intersect = |p: usize, q: usize| -> (i128, i128) {
            let (fp, fq) = (g(p).unwrap(), g(q).unwrap());
            let (p, q) = (p as i128, q as i128);
            ((fq + q * q) - (fp + p * p), 2 * (q - p))
        };
        let le = |a: (i128, i128), b: (i128, i128)| a.0 * b.1 <= b.0 * a.1;
        for &q in &cols[1..] {
            loop {
                let s = intersect(v[k], q);
                if k > 0 && le(s, z[k]) {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    break;
                }
            }
        }
        // Walk pixels; region k covers x with z[k] < x <= z[k+1] so that an
        // exact tie goes to the left (smaller) column.
        let mut j = 0usize;
        for x in 0..w {
            let xf = (x as i128, 1i128);
            while j < k && !le(xf, z[j + 1]) {
                j += 1;
            }
            let q = v[j];
            let dx = x.abs_diff(q) as u64;
            let gq = col_d[r * w + q];
            dist[r * w + x] = gq * gq + dx * dx;
            idx[r * w + x] = col_r[r * w + q] * w + q;
        }
    }
    (dist, idx)
}

/// Normalized 7x7 Gaussian with sigma 5, tiny entries zeroed.
pub fn gaussian_kernel() -> Vec<f64> {
    let m = (KERNEL / 2) as i64;
    let mut k: Vec<f64> = (-m..=m)
        .flat_map(|y| (-m..=m).map(move |x| (-((x * x + y * y) as f64) / (2.0 * SIGMA * SIGMA)).exp()))
        .collect();
    let max = k.iter().cloned().fold(0.0, f64::max);
    for v in &mut k {
        if *v < EPS * max {
            *v = 0.0;
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded same-size 2-D filtering with a symmetric kernel.
fn filter(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let m = (KERNEL / 2) as isize;
    let mut out = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for dy in -m..=m {
                let rr = r + dy;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dx in -m..=m {
                    let cc = c + dx;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += k[((dy + m) * KERNEL as isize + dx + m) as usize] * x[rr as usize * w + cc as usize];
                }
            }
            out[r as usize * w + c as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure of a `[0, 1]` prediction; 0 for empty ground truth.
pub fn weighted_f(pred: &[f64], gt: &[f64], w: usize, h: usize) -> Result<f64> {
    check_dims(pred, gt, w, h)?;
    let g = binarize_gt(gt);
    if !g.iter().any(|&b| b) {
        return Ok(0.0);
    }
    let (dist2, nearest) = edt_with_indices(&g, w, h);
    let e: Vec<f64> = pred.iter().zip(&g).map(|(&p, &b)| (p - b as u8 as f64).abs()).collect();
    let et: Vec<f64> = (0..w * h).map(|i| if g[i] { e[i] } else { e[nearest[i]] }).collect();
    let ea = filter(&et, w, h, &gaussian_kernel());
    let decay = 0.5f64.ln() / 5.0;
    let (mut fp, mut ew_fg, mut n_fg) = (0.0, 0.0, 0usize);
    for i in 0..w * h {
        let min_e = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if g[i] {
            ew_fg += min_e;
            n_fg += 1;
        } else {
            let b = 2.0 - (decay * (dist2[i] as f64).sqrt()).exp();
            fp += min_e * b;
        }
    }
    let tp = n_fg as f64 - ew_fg;
    let r = 1.0 - ew_fg / n_fg as f64;
    let p = tp / (tp + fp + EPS);
    Ok((1.0 + WF_BETA2) * r * p / (r + WF_BETA2 * p + EPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(feature: &[bool], w: usize, h: usize) -> (Vec<u64>, Vec<usize>) {
        let mut d = vec![u64::MAX; w * h];
        let mut ix = vec![usize::MAX; w * h];
        for p in 0..w * h {
            let (pr, pc) = (p / w, p % w);
            let mut best: Option<(u64, usize, usize)> = None;
            for q in 0..w * h {
                if !feature[q] {
                    continue;
                }
                let (qr, qc) = (q / w, q % w);
                let dd = (pr.abs_diff(qr) * pr.abs_diff(qr) + pc.abs_diff(qc) * pc.abs_diff(qc)) as u64;
                let key = (dd, qc, qr);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            if let Some((dd, qc, qr)) = best {
                d[p] = dd;
                ix[p] = qr * w + qc;
            }
        }
        (d, ix)
    }

    #[test]
    fn edt_matches_brute_force_including_ties() {
        let mut state = 12345u64;
        for trial in 0..200 {
            let (w, h) = (1 + trial % 9, 1 + (trial / 9) % 8);
            let feature: Vec<bool> = (0..w * h)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 60) < 3
                })
                .collect();
            assert_eq!(edt_with_indices(&feature, w, h), brute(&feature, w, h), "w={w} h={h} {feature:?}");
        }
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel();
        assert_eq!(k.len(), 49);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        // Interior object: zero-padded filtering only softens errors at the image border.
        let gt: Vec<f64> = (0..256).map(|i| ((6..10).contains(&(i / 16)) && (5..11).contains(&(i % 16))) as u8 as f64).collect();
        assert!((weighted_f(&gt, &gt, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(weighted_f(&[0.0; 256], &gt, 16, 16).unwrap(), 0.0);
        assert_eq!(weighted_f(&[0.5; 36], &[0.0; 36], 6, 6).unwrap(), 0.0);
    }
}
