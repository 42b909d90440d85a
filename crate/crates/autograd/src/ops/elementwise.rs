//! Pointwise and broadcasting arithmetic.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::graph::Var;
use crate::tensor::Tensor;

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    fn unary(
        &self,
        forward: impl Fn(f64) -> f64,
        derivative: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let out = self.value.map(forward);
        let x = self.value_rc();
        let y = std::rc::Rc::new(out.clone());
        self.graph.record(&[self], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| gv * derivative(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "add");
        let out = self.value.zip_map(&other.value, |a, b| a + b);
        self.graph
            .record(&[self, other], out, |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "sub");
        let out = self.value.zip_map(&other.value, |a, b| a - b);
        self.graph.record(&[self, other], out, |g, needs| {
            vec![
                Some(g.clone()),
                needs[1].then(|| g.map(|v| -v)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "mul");
        let out = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph.record(&[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(&self, other: &Var<'g>) -> Var<'g> {
        same_shape(self, other, "div");
        let out = self.value.zip_map(&other.value, |a, b| a / b);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph.record(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| g.zip_map(&b, |gv, bv| gv / bv));
            let gb = needs[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                    .collect();
                Tensor::new(g.shape().to_vec(), data)
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, factor: f64) -> Var<'g> {
        let out = self.value.map(|v| v * factor);
        self.graph
            .record(&[self], out, move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let out = self.value.map(|v| v + c);
        self.graph.record(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Var<'g> {
        self.neg().add_scalar(c)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    /// `x[..., c] + bias[c]` over the last axis.
    pub fn add_bias(&self, bias: &Var<'g>) -> Var<'g> {
        let c = *self.shape().last().expect("add_bias on scalar");
        assert_eq!(bias.shape(), &[c], "add_bias: bias must be [{c}]");
        let mut out = (*self.value).clone();
        let b = bias.value.data();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.graph.record(&[self, bias], out, move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(vec![c], acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// `x[n, c, ...] + bias[c]` over axis 1.
    pub fn add_channel(&self, bias: &Var<'g>) -> Var<'g> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "add_channel needs rank >= 2");
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert_eq!(bias.shape(), &[c], "add_channel: bias must be [{c}]");
        let mut out = (*self.value).clone();
        let b = bias.value.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for v in &mut out.data_mut()[base..base + inner] {
                    *v += b[ci];
                }
            }
        }
        self.graph.record(&[self, bias], out, move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for ni in 0..n {
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let base = (ni * c + ci) * inner;
                        *a += g.data()[base..base + inner].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![c], acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// `x[n, c, ...] * s[n, c]`, broadcasting `s` over trailing axes.
    pub fn mul_channel(&self, s: &Var<'g>) -> Var<'g> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "mul_channel needs rank >= 2");
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert_eq!(s.shape(), &[n, c], "mul_channel: scale must be [{n}, {c}]");
        let mut out = (*self.value).clone();
        for (nc, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate().take(n * c) {
            let sv = s.value.data()[nc];
            for v in chunk {
                *v *= sv;
            }
        }
        let (x, sc) = (self.value_rc(), s.value_rc());
        self.graph.record(&[self, s], out, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for (nc, chunk) in gx.data_mut().chunks_mut(inner.max(1)).enumerate().take(n * c) {
                    let sv = sc.data()[nc];
                    for v in chunk {
                        *v *= sv;
                    }
                }
                gx
            });
            let gs = needs[1].then(|| {
                let data = (0..n * c)
                    .map(|nc| {
                        let base = nc * inner;
                        g.data()[base..base + inner]
                            .iter()
                            .zip(&x.data()[base..base + inner])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                Tensor::new(vec![n, c], data)
            });
            vec![gx, gs]
        })
    }

    /// Repeats a tensor with leading axis 1 `n` times along that axis.
    pub fn broadcast_leading(&self, n: usize) -> Var<'g> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.first(), Some(&1), "broadcast_leading needs leading axis 1");
        let mut out_shape = shape.clone();
        out_shape[0] = n;
        let block = self.value.numel();
        let mut data = Vec::with_capacity(block * n);
        for _ in 0..n {
            data.extend_from_slice(self.value.data());
        }
        self.graph
            .record(&[self], Tensor::new(out_shape, data), move |g, _| {
                let mut acc = vec![0.0; block];
                for chunk in g.data().chunks(block) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(shape.clone(), acc))]
            })
    }
}
