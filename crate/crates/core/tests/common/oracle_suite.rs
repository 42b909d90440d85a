//! Metrics and edge modules against independent straight-line references.
//! Each case returns its worst absolute difference; callers compare it
//! against [`TOL`].

use super::uniform;
use mdsam_autograd::{Graph, Tensor};
use mdsam_core::dem::{edge_enhance, init_edge_enhancer, init_meem, meem};
use mdsam_core::layers::BN_EPS;
use mdsam_core::metrics::{e_measure, f_measure_curve, mae, s_measure, weighted_f};
use mdsam_core::params::{Fwd, GradScope, Init, ParamGroup, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 16;
pub const TOL: f64 = 1e-6;

// ---------- random pairs ----------

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut gt = vec![0.0; N * N];
    let kind = rng.random_range(0..3);
    loop {
        match kind {
            0 => {
                let (r0, c0) = (rng.random_range(0..N - 2), rng.random_range(0..N - 2));
                let (r1, c1) = (rng.random_range(r0 + 1..N), rng.random_range(c0 + 1..N));
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        gt[r * N + c] = 1.0;
                    }
                }
            }
            1 => {
                let (cy, cx, rad) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0), rng.random_range(1.5..6.0));
                for r in 0..N {
                    for c in 0..N {
                        let d2: f64 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        if d2 <= rad * rad {
                            gt[r * N + c] = 1.0;
                        }
                    }
                }
            }
            _ => {
                for g in gt.iter_mut() {
                    *g = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
                }
            }
        }
        let fg = gt.iter().filter(|&&g| g > 0.5).count();
        if fg > 0 && fg < N * N {
            break;
        }
        gt.iter_mut().for_each(|g| *g = 0.0);
    }
    let noise = rng.random_range(0.1..0.9);
    let pred: Vec<f64> = gt
        .iter()
        .map(|&g| ((1.0 - noise) * g + noise * rng.random::<f64>()).clamp(0.0, 1.0))
        .collect();
    (pred, gt)
}

fn pairs() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..100).map(|_| random_pair(&mut rng)).collect()
}

// ---------- references ----------

fn ref_mae(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let mut lo = p[0];
    let mut hi = p[0];
    for &v in p {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    if hi == lo {
        return p.to_vec();
    }
    p.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn ref_f_curve(p: &[f64], g: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = normalized(p).iter().map(|v| (v * 255.0).round()).collect();
    let mut out = Vec::new();
    for t in 0..256 {
        let (mut tp, mut fp, mut pos) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            let gt = g[i] >= 0.5;
            let pr = q[i] > t as f64;
            if gt {
                pos += 1.0;
            }
            if pr && gt {
                tp += 1.0;
            }
            if pr && !gt {
                fp += 1.0;
            }
        }
        let prec = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let rec = tp / pos;
        let f = if 0.3 * prec + rec == 0.0 { 0.0 } else { 1.3 * prec * rec / (0.3 * prec + rec) };
        out.push(f);
    }
    out
}

const EPS: f64 = 2.220446049250313e-16;

fn ref_s(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let gb: Vec<bool> = g.iter().map(|&v| v >= 0.5).collect();
    let y = gb.iter().filter(|&&b| b).count() as f64 / n;
    // object term
    let obj = |vals: Vec<f64>| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sd + EPS)
    };
    let fg: Vec<f64> = (0..p.len()).filter(|&i| gb[i]).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..p.len()).filter(|&i| !gb[i]).map(|i| 1.0 - p[i]).collect();
    let so = y * obj(fg) + (1.0 - y) * obj(bg);
    // region term
    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for r in 0..N {
        for c in 0..N {
            if gb[r * N + c] {
                sx += c as f64;
                sy += r as f64;
                cnt += 1.0;
            }
        }
    }
    let x = ((sx / cnt).round_ties_even() as usize + 1).min(N);
    let yc = ((sy / cnt).round_ties_even() as usize + 1).min(N);
    let ssim = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pv.push(p[r * N + c]);
                gv.push(if gb[r * N + c] { 1.0 } else { 0.0 });
            }
        }
        let k = pv.len();
        if k == 0 {
            return 0.0;
        }
        let kf = k as f64;
        let mx = pv.iter().sum::<f64>() / kf;
        let my = gv.iter().sum::<f64>() / kf;
        let d = if k > 1 { kf - 1.0 } else { 1.0 };
        let mut vx = 0.0;
        let mut vy = 0.0;
        let mut cxy = 0.0;
        for i in 0..k {
            vx += (pv[i] - mx) * (pv[i] - mx);
            vy += (gv[i] - my) * (gv[i] - my);
            cxy += (pv[i] - mx) * (gv[i] - my);
        }
        let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
        let a = 4.0 * mx * my * cxy;
        let b = (mx * mx + my * my) * (vx + vy);
        if a != 0.0 {
            a / (b + EPS)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let area = n;
    let w1 = (x * yc) as f64 / area;
    let w2 = ((N - x) * yc) as f64 / area;
    let w3 = (x * (N - yc)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let sr = w1 * ssim(0, yc, 0, x) + w2 * ssim(0, yc, x, N) + w3 * ssim(yc, N, 0, x) + w4 * ssim(yc, N, x, N);
    (0.5 * so + 0.5 * sr).max(0.0)
}

fn ref_e(p: &[f64], g: &[f64]) -> f64 {
    let pn = normalized(p);
    let n = p.len();
    let gb: Vec<f64> = g.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let gsum: f64 = gb.iter().sum();
    let mut total = 0.0;
    for t in 0..256 {
        let th = t as f64 / 256.0;
        let fm: Vec<f64> = pn.iter().map(|&v| if v > th { 1.0 } else { 0.0 }).collect();
        let mut s = 0.0;
        if gsum == 0.0 {
            for v in &fm {
                s += 1.0 - v;
            }
        } else if gsum == n as f64 {
            for v in &fm {
                s += v;
            }
        } else {
            let mp = fm.iter().sum::<f64>() / n as f64;
            let mg = gsum / n as f64;
            for i in 0..n {
                let a = fm[i] - mp;
                let b = gb[i] - mg;
                let phi = 2.0 * a * b / (a * a + b * b + EPS);
                s += (phi + 1.0) * (phi + 1.0) / 4.0;
            }
        }
        total += s / n as f64;
    }
    total / 256.0
}

fn ref_wf(p: &[f64], g: &[f64]) -> f64 {
    let gb: Vec<bool> = g.iter().map(|&v| v >= 0.5).collect();
    let e: Vec<f64> = (0..p.len()).map(|i| (p[i] - if gb[i] { 1.0 } else { 0.0 }).abs()).collect();
    // brute-force nearest foreground: smallest distance, then column, then row
    let mut dist = vec![0.0; N * N];
    let mut et = e.clone();
    for i in 0..N * N {
        if gb[i] {
            continue;
        }
        let (r, c) = (i / N, i % N);
        let mut best = (usize::MAX, usize::MAX, usize::MAX);
        for j in 0..N * N {
            if !gb[j] {
                continue;
            }
            let (rj, cj) = (j / N, j % N);
            let d = r.abs_diff(rj).pow(2) + c.abs_diff(cj).pow(2);
            if (d, cj, rj) < best {
                best = (d, cj, rj);
            }
        }
        dist[i] = (best.0 as f64).sqrt();
        et[i] = e[best.2 * N + best.1];
    }
    let mut k = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            ks += *v;
        }
    }
    let mut ea = vec![0.0; N * N];
    for r in 0..N as i64 {
        for c in 0..N as i64 {
            let mut acc = 0.0;
            for a in 0..7i64 {
                for b in 0..7i64 {
                    let (rr, cc) = (r + a - 3, c + b - 3);
                    if rr >= 0 && rr < N as i64 && cc >= 0 && cc < N as i64 {
                        acc += k[a as usize][b as usize] / ks * et[(rr * N as i64 + cc) as usize];
                    }
                }
            }
            ea[(r * N as i64 + c) as usize] = acc;
        }
    }
    let mut tp_err = 0.0;
    let mut fp = 0.0;
    let mut pos = 0.0;
    for i in 0..N * N {
        let m = if gb[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if gb[i] {
            tp_err += m;
            pos += 1.0;
        } else {
            fp += m * (2.0 - ((0.5f64).ln() / 5.0 * dist[i]).exp());
        }
    }
    let tp = pos - tp_err;
    let r = 1.0 - tp_err / pos;
    let pr = tp / (tp + fp + EPS);
    2.0 * r * pr / (r + pr + EPS)
}

pub fn mae_diff() -> f64 {
    pairs().iter().map(|(p, g)| (mae(p, g).unwrap() - ref_mae(p, g)).abs()).fold(0.0, f64::max)
}

/// Worst difference over every curve point, the maximum and the mean.
pub fn f_curve_diff() -> f64 {
    let mut worst = 0.0f64;
    for (p, g) in pairs() {
        let c = f_measure_curve(&p, &g).unwrap();
        let r = ref_f_curve(&p, &g);
        for t in 0..256 {
            worst = worst.max((c.f[t] - r[t]).abs());
        }
        let rmax = r.iter().cloned().fold(0.0, f64::max);
        worst = worst.max((c.f_max - rmax).abs());
        worst = worst.max((c.f_mean - r.iter().sum::<f64>() / 256.0).abs());
    }
    worst
}

pub fn s_measure_diff() -> f64 {
    pairs().iter().map(|(p, g)| (s_measure(p, g, N, N).unwrap() - ref_s(p, g)).abs()).fold(0.0, f64::max)
}

pub fn e_measure_diff() -> f64 {
    pairs().iter().map(|(p, g)| (e_measure(p, g).unwrap() - ref_e(p, g)).abs()).fold(0.0, f64::max)
}

pub fn weighted_f_diff() -> f64 {
    pairs().iter().map(|(p, g)| (weighted_f(p, g, N, N).unwrap() - ref_wf(p, g)).abs()).fold(0.0, f64::max)
}

// ---------- edge modules ----------

struct Maps {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Maps {
    fn of(t: &Tensor) -> Maps {
        let s = t.shape();
        Maps { n: s[0], c: s[1], h: s[2], w: s[3], d: t.data().to_vec() }
    }
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }
    fn zeros_like(&self, c: usize) -> Maps {
        Maps { n: self.n, c, h: self.h, w: self.w, d: vec![0.0; self.n * c * self.h * self.w] }
    }
    fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }
}

fn loop_conv1x1(x: &Maps, w: &Tensor, b: &Tensor) -> Maps {
    let co = w.dim(0);
    let mut out = x.zeros_like(co);
    for n in 0..x.n {
        for o in 0..co {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b.data()[o];
                    for i in 0..x.c {
                        acc += w.data()[o * x.c + i] * x.at(n, i, y, xx);
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

fn loop_bn(x: &Maps, store: &ParamStore, prefix: &str, train: bool) -> Maps {
    let gamma = store.get(&format!("{prefix}.weight")).unwrap();
    let beta = store.get(&format!("{prefix}.bias")).unwrap();
    let mut out = x.zeros_like(x.c);
    for c in 0..x.c {
        let (mean, var) = if train {
            let mut s = 0.0;
            let cnt = (x.n * x.h * x.w) as f64;
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        s += x.at(n, c, y, xx);
                    }
                }
            }
            let m = s / cnt;
            let mut v = 0.0;
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        v += (x.at(n, c, y, xx) - m).powi(2);
                    }
                }
            }
            (m, v / cnt)
        } else {
            (
                store.buffer(&format!("{prefix}.running_mean")).unwrap().data()[c],
                store.buffer(&format!("{prefix}.running_var")).unwrap().data()[c],
            )
        };
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(n, c, y, xx) - mean) / (var + BN_EPS).sqrt() * gamma.data()[c] + beta.data()[c];
                    out.set(n, c, y, xx, v);
                }
            }
        }
    }
    out
}

fn loop_sigmoid(x: &Maps) -> Maps {
    Maps { d: x.d.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(), ..x.zeros_like(x.c) }
}

fn loop_avg3(x: &Maps) -> Maps {
    let mut out = x.zeros_like(x.c);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let (mut s, mut k) = (0.0, 0.0);
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xq) = (y as i64 + dy, xx as i64 + dx);
                            if yy >= 0 && yy < x.h as i64 && xq >= 0 && xq < x.w as i64 {
                                s += x.at(n, c, yy as usize, xq as usize);
                                k += 1.0;
                            }
                        }
                    }
                    out.set(n, c, y, xx, s / k);
                }
            }
        }
    }
    out
}

fn loop_cbs(x: &Maps, store: &ParamStore, prefix: &str, train: bool) -> Maps {
    let conv = loop_conv1x1(
        x,
        store.get(&format!("{prefix}.conv.weight")).unwrap(),
        store.get(&format!("{prefix}.conv.bias")).unwrap(),
    );
    loop_sigmoid(&loop_bn(&conv, store, &format!("{prefix}.bn"), train))
}

fn loop_edge(x: &Maps, store: &ParamStore, prefix: &str, train: bool) -> Maps {
    let ap = loop_avg3(x);
    let diff = Maps { d: x.d.iter().zip(&ap.d).map(|(a, b)| a - b).collect(), ..x.zeros_like(x.c) };
    let t = loop_cbs(&diff, store, prefix, train);
    Maps { d: t.d.iter().zip(&x.d).map(|(a, b)| a + b).collect(), ..x.zeros_like(x.c) }
}

fn loop_meem(x: &Maps, store: &ParamStore, p: &str, train: bool) -> Maps {
    let e0 = loop_conv1x1(x, store.get(&format!("{p}.e0.weight")).unwrap(), store.get(&format!("{p}.e0.bias")).unwrap());
    let mut levels = vec![];
    let mut e = Maps { d: e0.d.clone(), ..e0.zeros_like(e0.c) };
    levels.push(e0);
    for t in 0..3 {
        e = loop_avg3(&loop_cbs(&e, store, &format!("{p}.pyramid.{t}"), train));
        levels.push(loop_edge(&e, store, &format!("{p}.edge.{t}"), train));
    }
    let c = x.c;
    let mut cat = x.zeros_like(4 * c);
    for (l, m) in levels.iter().enumerate() {
        for n in 0..x.n {
            for ch in 0..c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        cat.set(n, l * c + ch, y, xx, m.at(n, ch, y, xx));
                    }
                }
            }
        }
    }
    loop_conv1x1(&cat, store.get(&format!("{p}.fuse.weight")).unwrap(), store.get(&format!("{p}.fuse.bias")).unwrap())
}

/// Randomizes batch-norm affine parameters and running statistics so the
/// oracle sees non-trivial values.
fn perturb_bn(store: &mut ParamStore) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).filter(|n| n.contains(".bn.")).collect();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, uniform(&shape, 0.5, 1.5, 100 + i as u64)).unwrap();
    }
    let bufs: Vec<String> = store.iter_buffers().map(|(n, _)| n.clone()).collect();
    for (i, n) in bufs.iter().enumerate() {
        let shape = store.buffer(n).unwrap().shape().to_vec();
        let (lo, hi) = if n.ends_with("running_var") { (0.5, 2.0) } else { (-0.5, 0.5) };
        store.set_buffer(n, uniform(&shape, lo, hi, 200 + i as u64)).unwrap();
    }
}

/// Worst absolute difference over train and eval batch norm.
pub fn edge_enhance_diff() -> f64 {
    let mut store = ParamStore::new();
    init_edge_enhancer(&mut Init::new(&mut store, 3, ParamGroup::New), "e", 4);
    perturb_bn(&mut store);
    let x = uniform(&[2, 4, 8, 8], -1.0, 1.0, 9);
    let mut worst = 0.0f64;
    for train in [true, false] {
        let g = Graph::no_grad();
        let f = Fwd::new(&g, &store, train, GradScope::None);
        let out = edge_enhance(&f, "e", &g.constant(x.clone())).unwrap();
        let reference = loop_edge(&Maps::of(&x), &store, "e", train);
        let diff = out.value().data().iter().zip(&reference.d).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
    }
    worst
}

/// Worst absolute difference over train and eval batch norm.
pub fn meem_diff() -> f64 {
    let mut store = ParamStore::new();
    init_meem(&mut Init::new(&mut store, 4, ParamGroup::New), "m", 3);
    perturb_bn(&mut store);
    let x = uniform(&[2, 3, 8, 8], -1.0, 1.0, 10);
    let mut worst = 0.0f64;
    for train in [true, false] {
        let g = Graph::no_grad();
        let f = Fwd::new(&g, &store, train, GradScope::None);
        let out = meem(&f, "m", &g.constant(x.clone())).unwrap();
        let reference = loop_meem(&Maps::of(&x), &store, "m", train);
        let diff = out.value().data().iter().zip(&reference.d).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff);
    }
    worst
}

/// Every case by name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("mae", mae_diff()),
        ("f_curve", f_curve_diff()),
        ("s_measure", s_measure_diff()),
        ("e_measure", e_measure_diff()),
        ("weighted_f", weighted_f_diff()),
        ("edge_enhance", edge_enhance_diff()),
        ("meem", meem_diff()),
    ]
}
