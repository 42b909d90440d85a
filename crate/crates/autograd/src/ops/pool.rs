//! Average pooling and bilinear resampling over `[N, C, H, W]` tensors.

use crate::graph::Var;
use crate::tensor::Tensor;

fn nchw(shape: &[usize], op: &str) -> (usize, usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h, w),
        _ => panic!("{op} expects [N, C, H, W], got {shape:?}"),
    }
}

/// Half-open source range `[start, end)` of adaptive-pooling bin `i`.
pub fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Per-output-index interpolation taps `(i0, i1, frac)` for bilinear
/// resizing with half-pixel centers (align_corners = false).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a `[N, C, H, W]` tensor (no gradient).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = nchw(x.shape(), "resize_bilinear");
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Nearest-neighbour resize (source index `floor(dst * in / out)`).
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = nchw(x.shape(), "resize_nearest");
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            let sy = ((oy * h) / oh).min(h - 1);
            for ox in 0..ow {
                let sx = ((ox * w) / ow).min(w - 1);
                out.push(xd[(p * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// 3x3, stride-1, padding-1 average pool where padded cells are left out
/// of both the sum and the count.
pub fn avg_pool3_same(x: &Tensor) -> Tensor {
    let (n, c, h, w) = nchw(x.shape(), "avg_pool3");
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (ya, yb) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (xa, xb) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut s = 0.0;
                for yy in ya..=yb {
                    for xi in xa..=xb {
                        s += src[yy * w + xi];
                    }
                }
                dst[y * w + xx] = s / ((yb - ya + 1) * (xb - xa + 1)) as f64;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<'g> Var<'g> {
    /// See [`avg_pool3_same`].
    pub fn avg_pool3_same(&self) -> Var<'g> {
        let (n, c, h, w) = nchw(self.shape(), "avg_pool3");
        let out = avg_pool3_same(&self.value);
        self.graph.record(&[self], out, move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            for p in 0..n * c {
                let src = &gd[p * h * w..(p + 1) * h * w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    let (ya, yb) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    for xx in 0..w {
                        let (xa, xb) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                        let share = src[y * w + xx] / ((yb - ya + 1) * (xb - xa + 1)) as f64;
                        for yy in ya..=yb {
                            for xi in xa..=xb {
                                dst[yy * w + xi] += share;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx))]
        })
    }

    /// Adaptive average pooling to an `oh x ow` grid. Targets larger than
    /// the input repeat source cells, as bins then overlap.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Var<'g> {
        let (n, c, h, w) = nchw(self.shape(), "adaptive_avg_pool2d");
        assert!(oh >= 1 && ow >= 1 && h >= 1 && w >= 1, "adaptive pool {oh}x{ow} from {h}x{w}");
        let by: Vec<(usize, usize)> = (0..oh).map(|i| adaptive_bin(i, h, oh)).collect();
        let bx: Vec<(usize, usize)> = (0..ow).map(|i| adaptive_bin(i, w, ow)).collect();
        let xd = self.value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        s += src[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                    }
                    out[(p * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.graph
            .record(&[self], Tensor::new(vec![n, c, oh, ow], out), move |g, _| {
                let gd = g.data();
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1)) in by.iter().enumerate() {
                        for (ox, &(x0, x1)) in bx.iter().enumerate() {
                            let share = gd[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for v in &mut dst[yy * w + x0..yy * w + x1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx))]
            })
    }

    /// Bilinear resize with half-pixel centers (align_corners = false).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<'g> {
        let (n, c, h, w) = nchw(self.shape(), "resize_bilinear");
        if (oh, ow) == (h, w) {
            return self.clone();
        }
        let out = resize_bilinear(&self.value, oh, ow);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        self.graph.record(&[self], out, move |g, _| {
            let gd = g.data();
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &gd[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = src[oy * ow + ox];
                        dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += v * fy * (1.0 - fx);
                        dst[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx))]
        })
    }
}
