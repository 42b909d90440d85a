//! Reductions and layout changes.

use crate::graph::Var;
use crate::tensor::{numel_of, Tensor};

impl<'g> Var<'g> {
    /// Sum of all entries as a zero-dimensional tensor.
    pub fn sum(&self) -> Var<'g> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value.sum());
        self.graph.record(&[self], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums every axis after the first `keep`; the result has shape
    /// `shape[..keep]`.
    pub fn sum_trailing(&self, keep: usize) -> Var<'g> {
        let shape = self.shape().to_vec();
        assert!(keep <= shape.len(), "sum_trailing keep out of range");
        let out_shape = shape[..keep].to_vec();
        let inner: usize = shape[keep..].iter().product();
        let outer = numel_of(&out_shape);
        let data: Vec<f64> = (0..outer)
            .map(|o| self.value.data()[o * inner..(o + 1) * inner].iter().sum())
            .collect();
        self.graph
            .record(&[self], Tensor::new(out_shape, data), move |g, _| {
                let mut gx = Vec::with_capacity(outer * inner);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv, inner));
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    pub fn mean_trailing(&self, keep: usize) -> Var<'g> {
        let inner: usize = self.shape()[keep..].iter().product();
        self.sum_trailing(keep).scale(1.0 / inner as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let old = self.shape().to_vec();
        let out = (*self.value).clone().reshape(shape);
        self.graph.record(&[self], out, move |g, _| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = self.value.permute(axes);
        self.graph
            .record(&[self], out, move |g, _| vec![Some(g.permute(&inverse))])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let shape = self.shape().to_vec();
        let out = self.value.narrow(axis, start, len);
        self.graph.record(&[self], out, move |g, _| {
            let before = start;
            let after = shape[axis] - start - len;
            let mut parts = Vec::new();
            let zero_shape = |n: usize| {
                let mut s = shape.clone();
                s[axis] = n;
                Tensor::zeros(&s)
            };
            let zb = zero_shape(before);
            let za = zero_shape(after);
            if before > 0 {
                parts.push(&zb);
            }
            parts.push(g);
            if after > 0 {
                parts.push(&za);
            }
            vec![Some(Tensor::concat(&parts, axis))]
        })
    }

    /// Concatenates variables along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let refs: Vec<&Var<'g>> = parts.iter().collect();
        graph.record(&refs, out, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| g.narrow(axis, start, len));
                    start += len;
                    piece
                })
                .collect()
        })
    }
}
