//! 2-D convolutions over `[N, C, H, W]` tensors.

use crate::graph::Var;
use crate::ops::linalg::gemm_rm;
use crate::tensor::Tensor;

/// Geometry of a strided, zero-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn same(groups: usize) -> Self {
        Self { stride: 1, padding: 1, groups }
    }

    pub const fn pointwise() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }

    pub const fn patch(size: usize) -> Self {
        Self { stride: size, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    cig: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: Geom, col: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cig {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: Geom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cig {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// Cross-correlation of `[N, Ci, H, W]` with a `[Co, Ci/groups, kh, kw]`
    /// weight and optional `[Co]` bias.
    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, spec: Conv2dSpec) -> Var<'g> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4, got {ws:?}");
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = spec.groups;
        assert!(groups >= 1 && ci % groups == 0 && co % groups == 0, "conv2d: bad groups");
        assert_eq!(cig * groups, ci, "conv2d: weight expects {} input channels, got {ci}", cig * groups);
        assert!(h + 2 * spec.padding >= kh && w + 2 * spec.padding >= kw, "conv2d: kernel larger than input");
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let geom = Geom { cig, h, w, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding };
        let cog = co / groups;
        let k = geom.k();
        let plane = ho * wo;
        let xd = self.value.data();
        let wd = weight.value.data();
        let mut out = vec![0.0; n * co * plane];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * plane] };
        for ni in 0..n {
            for gi in 0..groups {
                let xin = &xd[(ni * ci + gi * cig) * h * w..(ni * ci + (gi + 1) * cig) * h * w];
                let cols: &[f64] = if geom.is_pointwise() {
                    xin
                } else {
                    im2col(xin, geom, &mut col);
                    &col
                };
                let wg = &wd[gi * cog * k..(gi + 1) * cog * k];
                let dst = &mut out[(ni * co + gi * cog) * plane..(ni * co + (gi + 1) * cog) * plane];
                gemm_rm(wg, cog, k, false, cols, k, plane, false, dst, false);
            }
        }
        let mut y = self.graph.record(
            &[self, weight],
            Tensor::new(vec![n, co, ho, wo], out),
            {
                let (x, wv) = (self.value_rc(), weight.value_rc());
                move |g, needs| {
                    let gd = g.data();
                    let xd = x.data();
                    let wd = wv.data();
                    let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
                    let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
                    let mut col = vec![0.0; k * plane];
                    let mut gcol = vec![0.0; k * plane];
                    for ni in 0..n {
                        for gi in 0..groups {
                            let xr = (ni * ci + gi * cig) * h * w..(ni * ci + (gi + 1) * cig) * h * w;
                            let gout = &gd[(ni * co + gi * cog) * plane..(ni * co + (gi + 1) * cog) * plane];
                            if let Some(gw) = gw.as_mut() {
                                let cols: &[f64] = if geom.is_pointwise() {
                                    &xd[xr.clone()]
                                } else {
                                    im2col(&xd[xr.clone()], geom, &mut col);
                                    &col
                                };
                                let dst = &mut gw[gi * cog * k..(gi + 1) * cog * k];
                                gemm_rm(gout, cog, plane, false, cols, k, plane, true, dst, true);
                            }
                            if let Some(gx) = gx.as_mut() {
                                let wg = &wd[gi * cog * k..(gi + 1) * cog * k];
                                if geom.is_pointwise() {
                                    gemm_rm(wg, cog, k, true, gout, cog, plane, false, &mut gx[xr], true);
                                } else {
                                    gemm_rm(wg, cog, k, true, gout, cog, plane, false, &mut gcol, false);
                                    col2im_add(&gcol, geom, &mut gx[xr]);
                                }
                            }
                        }
                    }
                    vec![
                        gx.map(|v| Tensor::new(x.shape().to_vec(), v)),
                        gw.map(|v| Tensor::new(wv.shape().to_vec(), v)),
                    ]
                }
            },
        );
        if let Some(b) = bias {
            y = y.add_channel(b);
        }
        y
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// windows), with a `[Ci, Co, k, k]` weight and optional `[Co]` bias.
    pub fn conv_transpose2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Var<'g> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be [N, C, H, W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be rank 4");
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wci, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wci, ci, "conv_transpose2d channel mismatch");
        let (ho, wo) = (h * kh, w * kw);
        let plane = h * w;
        let taps = co * kh * kw;
        let xd = self.value.data();
        let wd = weight.value.data();
        let mut out = vec![0.0; n * co * ho * wo];
        let mut t = vec![0.0; taps * plane];
        for ni in 0..n {
            let xin = &xd[ni * ci * plane..(ni + 1) * ci * plane];
            // t[(o, a, b), (i, j)] = sum_c w[c, (o, a, b)] x[c, (i, j)]
            gemm_rm(wd, ci, taps, true, xin, ci, plane, false, &mut t, false);
            let dst = &mut out[ni * co * ho * wo..(ni + 1) * co * ho * wo];
            scatter_taps(&t, dst, co, kh, kw, h, w);
        }
        let mut y = self.graph.record(
            &[self, weight],
            Tensor::new(vec![n, co, ho, wo], out),
            {
                let (x, wv) = (self.value_rc(), weight.value_rc());
                move |g, needs| {
                    let gd = g.data();
                    let xd = x.data();
                    let wd = wv.data();
                    let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
                    let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
                    let mut gt = vec![0.0; taps * plane];
                    for ni in 0..n {
                        gather_taps(&gd[ni * co * ho * wo..(ni + 1) * co * ho * wo], &mut gt, co, kh, kw, h, w);
                        if let Some(gx) = gx.as_mut() {
                            gemm_rm(wd, ci, taps, false, &gt, taps, plane, false, &mut gx[ni * ci * plane..(ni + 1) * ci * plane], false);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xin = &xd[ni * ci * plane..(ni + 1) * ci * plane];
                            gemm_rm(xin, ci, plane, false, &gt, taps, plane, true, gw, true);
                        }
                    }
                    vec![
                        gx.map(|v| Tensor::new(x.shape().to_vec(), v)),
                        gw.map(|v| Tensor::new(wv.shape().to_vec(), v)),
                    ]
                }
            },
        );
        if let Some(b) = bias {
            y = y.add_channel(b);
        }
        y
    }
}

fn scatter_taps(t: &[f64], dst: &mut [f64], co: usize, kh: usize, kw: usize, h: usize, w: usize) {
    let (ho, wo) = (h * kh, w * kw);
    for o in 0..co {
        for a in 0..kh {
            for b in 0..kw {
                let row = &t[((o * kh + a) * kw + b) * h * w..((o * kh + a) * kw + b + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        dst[(o * ho + i * kh + a) * wo + j * kw + b] = row[i * w + j];
                    }
                }
            }
        }
    }
}

fn gather_taps(src: &[f64], t: &mut [f64], co: usize, kh: usize, kw: usize, h: usize, w: usize) {
    let (ho, wo) = (h * kh, w * kw);
    for o in 0..co {
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut t[((o * kh + a) * kw + b) * h * w..((o * kh + a) * kw + b + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        row[i * w + j] = src[(o * ho + i * kh + a) * wo + j * kw + b];
                    }
                }
            }
        }
    }
}
