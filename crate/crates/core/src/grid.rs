//! Channel-first feature maps over a token grid.

use mdsam_autograd::Tensor;

use crate::error::{shape_err, Result};

/// A `D x H x W` feature map whose token view is the `(H*W) x D` matrix of
/// per-position embeddings in row-major position order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    data: Tensor,
}

impl TokenGrid {
    /// Wraps a `[D, H, W]` tensor.
    pub fn from_grid(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(shape_err(format!("token grid must be [D, H, W], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    /// Builds a grid from an `[H*W, D]` token matrix.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Self> {
        match *tokens.shape() {
            [n, d] if n == h * w => {
                let data = tokens.clone().reshape(&[h, w, d]).permute(&[2, 0, 1]);
                Ok(Self { data })
            }
            _ => Err(shape_err(format!(
                "expected [{}, D] tokens for a {h}x{w} grid, got {:?}",
                h * w,
                tokens.shape()
            ))),
        }
    }

    /// Builds grids from a batch laid out `[N, H, W, D]`.
    pub fn from_nhwc(batch: &Tensor) -> Result<Vec<Self>> {
        if batch.ndim() != 4 {
            return Err(shape_err(format!("expected [N, H, W, D], got {:?}", batch.shape())));
        }
        let n = batch.dim(0);
        let nchw = batch.permute(&[0, 3, 1, 2]);
        let (d, h, w) = (nchw.dim(1), nchw.dim(2), nchw.dim(3));
        Ok((0..n)
            .map(|i| Self {
                data: nchw.narrow(0, i, 1).reshape(&[d, h, w]),
            })
            .collect())
    }

    /// Stacks grids of equal shape into `[N, H, W, D]`.
    pub fn to_nhwc(grids: &[TokenGrid]) -> Result<Tensor> {
        let first = grids.first().ok_or_else(|| shape_err("no grids to stack"))?;
        let (d, h, w) = first.dims();
        let mut parts = Vec::with_capacity(grids.len());
        for g in grids {
            if g.dims() != (d, h, w) {
                return Err(shape_err(format!("grid {:?} differs from {:?}", g.dims(), (d, h, w))));
            }
            parts.push(g.data.clone().reshape(&[1, d, h, w]));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0).permute(&[0, 2, 3, 1]))
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.data.dim(0), self.data.dim(1), self.data.dim(2))
    }

    pub fn num_tokens(&self) -> usize {
        self.data.dim(1) * self.data.dim(2)
    }

    /// `[H*W, D]` token view.
    pub fn tokens(&self) -> Tensor {
        let (d, h, w) = self.dims();
        self.data.permute(&[1, 2, 0]).reshape(&[h * w, d])
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.all_finite()
    }
}
