//! Softmax and normalization layers.

use crate::graph::Var;
use crate::tensor::Tensor;

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased (n - 1) variance, as used for running estimates.
    pub var_unbiased: Tensor,
}

/// Whether batch norm normalizes with batch or running statistics.
pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

impl<'g> Var<'g> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let c = *self.shape().last().expect("softmax on scalar");
        let mut out = (*self.value).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = std::rc::Rc::new(out.clone());
        self.graph.record(&[self], out, move |g, _| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let c = *self.shape().last().expect("layer_norm on scalar");
        assert_eq!(gamma.shape(), &[c], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[c], "layer_norm beta shape");
        let rows = self.value.numel() / c;
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in self.value.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gm, bt) = (gamma.value.data(), beta.value.data());
        let out: Vec<f64> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(gm).zip(bt).map(|((x, g), b)| x * g + b))
            .collect();
        let out = Tensor::new(self.shape().to_vec(), out);
        let gamma_v = gamma.value_rc();
        let shape = self.shape().to_vec();
        self.graph
            .record(&[self, gamma, beta], out, move |g, needs| {
                let gd = g.data();
                let gamma = gamma_v.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let dxhat: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for i in 0..c {
                            gx[r * c + i] = inv_std[r] * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                    Tensor::new(shape.clone(), gx)
                });
                let ggamma = needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for (gr, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for i in 0..c {
                            acc[i] += gr[i] * xr[i];
                        }
                    }
                    Tensor::new(vec![c], acc)
                });
                let gbeta = needs[2].then(|| {
                    let mut acc = vec![0.0; c];
                    for gr in gd.chunks(c) {
                        for i in 0..c {
                            acc[i] += gr[i];
                        }
                    }
                    Tensor::new(vec![c], acc)
                });
                vec![gx, ggamma, gbeta]
            })
    }

    /// Batch normalization of an `[N, C, ...]` tensor over every axis except 1.
    ///
    /// In training mode the batch statistics are also returned so the caller
    /// can update running estimates.
    pub fn batch_norm(
        &self,
        gamma: &Var<'g>,
        beta: &Var<'g>,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> (Var<'g>, Option<BatchStats>) {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "batch_norm needs rank >= 2");
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert_eq!(gamma.shape(), &[c], "batch_norm gamma shape");
        assert_eq!(beta.shape(), &[c], "batch_norm beta shape");
        let count = (n * inner) as f64;
        let x = self.value.data();
        let train = matches!(mode, BatchNormMode::Train);
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        mean[ci] += x[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        var[ci] += x[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ci]) * (v - mean[ci]))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: Tensor::new(vec![c], mean.clone()),
                    var_unbiased: Tensor::new(vec![c], unbiased),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                assert_eq!(mean.shape(), &[c], "running mean shape");
                assert_eq!(var.shape(), &[c], "running var shape");
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gm, bt) = (gamma.value.data(), beta.value.data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
                    out[i] = xhat[i] * gm[ci] + bt[ci];
                }
            }
        }
        let gamma_v = gamma.value_rc();
        let out_shape = shape.clone();
        let var_out = self
            .graph
            .record(&[self, gamma, beta], Tensor::new(out_shape, out), move |g, needs| {
                let gd = g.data();
                let gamma = gamma_v.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for i in base..base + inner {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            let k = gamma[ci] * inv_std[ci];
                            for i in base..base + inner {
                                gx[i] = if train {
                                    k * (gd[i] - sum_g[ci] / count - xhat[i] * sum_gx[ci] / count)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    Tensor::new(shape.clone(), gx)
                });
                vec![
                    gx,
                    needs[1].then(|| Tensor::new(vec![c], sum_gx.clone())),
                    needs[2].then(|| Tensor::new(vec![c], sum_g.clone())),
                ]
            });
        (var_out, stats)
    }
}
