//! Thin layer helpers over [`Fwd`]: each looks up `{prefix}.weight` and
//! friends and applies the corresponding autograd op.

use mdsam_autograd::{BatchNormMode, Conv2dSpec, Var};

use crate::error::Result;
use crate::params::{Fwd, Init};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn linear<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let w = f.param(&format!("{prefix}.weight"))?;
    let b = f.param(&format!("{prefix}.bias"))?;
    Ok(x.linear(&w, Some(&b)))
}

pub fn conv<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>, spec: Conv2dSpec) -> Result<Var<'g>> {
    let w = f.param(&format!("{prefix}.weight"))?;
    let b = f.param(&format!("{prefix}.bias"))?;
    Ok(x.conv2d(&w, Some(&b), spec))
}

pub fn conv_nobias<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>, spec: Conv2dSpec) -> Result<Var<'g>> {
    let w = f.param(&format!("{prefix}.weight"))?;
    Ok(x.conv2d(&w, None, spec))
}

pub fn conv1x1<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    conv(f, prefix, x, Conv2dSpec::pointwise())
}

/// Layer norm over the last axis.
pub fn layer_norm<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>, eps: f64) -> Result<Var<'g>> {
    let w = f.param(&format!("{prefix}.weight"))?;
    let b = f.param(&format!("{prefix}.bias"))?;
    Ok(x.layer_norm(&w, &b, eps))
}

/// Layer norm over the channel axis of an `[N, C, H, W]` map.
pub fn layer_norm2d<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>, eps: f64) -> Result<Var<'g>> {
    let y = layer_norm(f, prefix, &x.permute(&[0, 2, 3, 1]), eps)?;
    Ok(y.permute(&[0, 3, 1, 2]))
}

/// Batch norm using batch statistics in training mode (recorded for the
/// running estimates) and running statistics otherwise.
pub fn batch_norm<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let w = f.param(&format!("{prefix}.weight"))?;
    let b = f.param(&format!("{prefix}.bias"))?;
    if f.is_train() {
        let (y, stats) = x.batch_norm(&w, &b, BatchNormMode::Train, BN_EPS);
        if let Some(stats) = stats {
            f.push_bn_stats(prefix, stats);
        }
        Ok(y)
    } else {
        let mean = f.buffer(&format!("{prefix}.running_mean"))?;
        let var = f.buffer(&format!("{prefix}.running_var"))?;
        Ok(x.batch_norm(&w, &b, BatchNormMode::Eval { mean, var }, BN_EPS).0)
    }
}

/// 3x3 convolution, batch norm and ReLU.
pub fn conv_bn_relu<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let y = conv(f, &format!("{prefix}.conv"), x, Conv2dSpec::same(1))?;
    Ok(batch_norm(f, &format!("{prefix}.bn"), &y)?.relu())
}

pub fn init_conv_bn(init: &mut Init<'_>, prefix: &str, ci: usize, co: usize, k: usize) {
    init.conv(&format!("{prefix}.conv"), ci, co, k, 1, true);
    init.batch_norm(&format!("{prefix}.bn"), co);
}

/// 1x1 convolution, batch norm and sigmoid.
pub fn conv1x1_bn_sigmoid<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let y = conv1x1(f, &format!("{prefix}.conv"), x)?;
    Ok(batch_norm(f, &format!("{prefix}.bn"), &y)?.sigmoid())
}

/// Scaled dot-product attention with `heads` heads over `[B, L, E]`
/// queries, keys and values. Returns `[B, Lq, E]`.
pub fn multi_head<'g>(q: &Var<'g>, k: &Var<'g>, v: &Var<'g>, heads: usize) -> Var<'g> {
    let (b, lq, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let hd = e / heads;
    let split = |x: &Var<'g>, l: usize| x.reshape(&[b, l, heads, hd]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, l, hd]);
    let (qh, kh, vh) = (split(q, lq), split(k, lk), split(v, lk));
    let attn = qh.matmul_t(&kh).scale(1.0 / (hd as f64).sqrt()).softmax();
    attn.matmul(&vh)
        .reshape(&[b, heads, lq, hd])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, lq, e])
}
