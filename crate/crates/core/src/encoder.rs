//! ViT image encoder with a multi-scale adapter in front of every layer.
//!
//! Token maps travel as `[N, H, W, D]` variables; the adapter's spatial
//! branches work on the channel-first view.

use mdsam_autograd::{Conv2dSpec, Var};

use crate::config::{AdapterConfig, EncoderConfig, ModelConfig};
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{conv, conv_nobias, layer_norm, layer_norm2d, linear, multi_head};
use crate::params::{Fwd, Init};

pub const ENCODER: &str = "image_encoder";
pub const ENCODER_LN_EPS: f64 = 1e-6;

pub fn block_prefix(i: usize) -> String {
    format!("{ENCODER}.blocks.{i}")
}

pub fn adapter_prefix(i: usize) -> String {
    format!("{ENCODER}.blocks.{i}.adapter")
}

/// Whether a parameter name belongs to an adapter.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(ENCODER) && name.contains(".adapter.")
}

/// Registers one adapter's parameters under `prefix`.
pub fn init_adapter(init: &mut Init<'_>, prefix: &str, cfg: &AdapterConfig) {
    let (d, hid, br) = (cfg.embed_dim, cfg.hidden(), cfg.branch());
    init.linear(&format!("{prefix}.down"), d, hid, true);
    for j in 0..cfg.pool_scales.len() {
        init.conv(&format!("{prefix}.branches.{j}.proj"), hid, br, 1, 1, true);
        init.conv(&format!("{prefix}.branches.{j}.dw"), br, br, 3, br, true);
    }
    if cfg.local {
        init.conv(&format!("{prefix}.local_dw"), hid, hid, 3, hid, true);
    }
    init.conv(&format!("{prefix}.fuse"), cfg.fuse_in(), hid, 1, 1, true);
    if cfg.zero_init_up {
        init.linear_zero(&format!("{prefix}.up"), hid, d);
    } else {
        init.linear(&format!("{prefix}.up"), hid, d, true);
    }
}

/// Analytic parameter count of one adapter.
pub fn adapter_param_count(cfg: &AdapterConfig) -> usize {
    let (d, hid, br) = (cfg.embed_dim, cfg.hidden(), cfg.branch());
    let branches = cfg.pool_scales.len() * ((hid * br + br) + (9 * br + br));
    let local = if cfg.local { 9 * hid + hid } else { 0 };
    (d * hid + hid) + branches + local + (cfg.fuse_in() * hid + hid) + (hid * d + d)
}

fn expect_shape(f: &Fwd<'_, '_>, name: &str, shape: &[usize]) -> Result<()> {
    let t = f.param(name)?;
    if t.shape() != shape {
        return Err(config_err(format!(
            "parameter `{name}` has shape {:?}, configuration expects {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Multi-scale adapter over an `[N, H, W, D]` token map. Returns the
/// up-projected multi-scale feature plus the input.
pub fn lmsa_forward<'g>(f: &Fwd<'g, '_>, prefix: &str, cfg: &AdapterConfig, x: &Var<'g>) -> Result<Var<'g>> {
    let [n, h, w, d] = *x.shape() else {
        return Err(shape_err(format!("adapter input must be [N, H, W, D], got {:?}", x.shape())));
    };
    if d != cfg.embed_dim {
        return Err(config_err(format!("adapter expects D = {}, input has {d}", cfg.embed_dim)));
    }
    cfg.validate()?;
    let (hid, br) = (cfg.hidden(), cfg.branch());
    expect_shape(f, &format!("{prefix}.down.weight"), &[hid, d])?;
    expect_shape(f, &format!("{prefix}.fuse.weight"), &[hid, cfg.fuse_in(), 1, 1])?;
    expect_shape(f, &format!("{prefix}.up.weight"), &[d, hid])?;

    let xs = linear(f, &format!("{prefix}.down"), x)?.relu().permute(&[0, 3, 1, 2]);
    let mut parts = Vec::with_capacity(cfg.pool_scales.len() + 1);
    for (j, &s) in cfg.pool_scales.iter().enumerate() {
        let bp = format!("{prefix}.branches.{j}");
        expect_shape(f, &format!("{bp}.proj.weight"), &[br, hid, 1, 1])?;
        let pooled = xs.adaptive_avg_pool2d(s, s);
        let y = conv(f, &format!("{bp}.proj"), &pooled, Conv2dSpec::pointwise())?.gelu();
        let y = conv(f, &format!("{bp}.dw"), &y, Conv2dSpec::same(br))?.gelu();
        parts.push(y.resize_bilinear(h, w));
    }
    if cfg.local {
        parts.push(conv(f, &format!("{prefix}.local_dw"), &xs, Conv2dSpec::same(hid))?.gelu());
    }
    let fused = conv(f, &format!("{prefix}.fuse"), &Var::concat(&parts, 1), Conv2dSpec::pointwise())?.gelu();
    debug_assert_eq!(fused.shape(), &[n, hid, h, w]);
    let up = linear(f, &format!("{prefix}.up"), &fused.permute(&[0, 2, 3, 1]))?;
    Ok(up.add(x))
}

pub fn init_block(init: &mut Init<'_>, prefix: &str, enc: &EncoderConfig) {
    let d = enc.embed_dim;
    init.norm(&format!("{prefix}.norm1"), d);
    init.linear(&format!("{prefix}.attn.qkv"), d, 3 * d, true);
    init.linear(&format!("{prefix}.attn.proj"), d, d, true);
    init.norm(&format!("{prefix}.norm2"), d);
    init.linear(&format!("{prefix}.mlp.lin1"), d, enc.mlp_dim, true);
    init.linear(&format!("{prefix}.mlp.lin2"), enc.mlp_dim, d, true);
}

/// Global multi-head self-attention over all tokens of `[N, H, W, D]`.
fn self_attention<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>, heads: usize) -> Result<Var<'g>> {
    let [n, h, w, d] = *x.shape() else {
        unreachable!("checked by caller")
    };
    let qkv = linear(f, &format!("{prefix}.qkv"), &x.reshape(&[n, h * w, d]))?;
    let (q, k, v) = (qkv.narrow(2, 0, d), qkv.narrow(2, d, d), qkv.narrow(2, 2 * d, d));
    let o = multi_head(&q, &k, &v, heads);
    Ok(linear(f, &format!("{prefix}.proj"), &o)?.reshape(&[n, h, w, d]))
}

/// One transformer layer; with `adapter` set the adapter output replaces
/// the layer input in both the attention branch and its residual.
pub fn transformer_layer_forward<'g>(
    f: &Fwd<'g, '_>,
    prefix: &str,
    enc: &EncoderConfig,
    adapter: Option<&AdapterConfig>,
    x: &Var<'g>,
) -> Result<Var<'g>> {
    if x.shape().len() != 4 || x.shape()[3] != enc.embed_dim {
        return Err(shape_err(format!(
            "layer input must be [N, H, W, {}], got {:?}",
            enc.embed_dim,
            x.shape()
        )));
    }
    let x = match adapter {
        Some(cfg) => lmsa_forward(f, &format!("{prefix}.adapter"), cfg, x)?,
        None => x.clone(),
    };
    let a = layer_norm(f, &format!("{prefix}.norm1"), &x, ENCODER_LN_EPS)?;
    let h = self_attention(f, &format!("{prefix}.attn"), &a, enc.num_heads)?.add(&x);
    let m = layer_norm(f, &format!("{prefix}.norm2"), &h, ENCODER_LN_EPS)?;
    let m = linear(f, &format!("{prefix}.mlp.lin1"), &m)?.gelu();
    let m = linear(f, &format!("{prefix}.mlp.lin2"), &m)?;
    Ok(m.add(&h))
}

/// Registers patch embedding, positional embedding, blocks (with adapters
/// when enabled) and the neck. Adapter parameters go to `adapter_group`.
pub fn init_encoder(init: &mut Init<'_>, cfg: &ModelConfig, adapter_group: crate::params::ParamGroup) {
    let e = &cfg.encoder;
    let d = e.embed_dim;
    let g = cfg.grid();
    init.conv(&format!("{ENCODER}.patch_embed.proj"), 3, d, e.patch_size, 1, true);
    init.normal(&format!("{ENCODER}.pos_embed"), &[1, g, g, d], 0.02);
    let base_group = init.group;
    let acfg = cfg.adapter_config();
    for i in 0..e.depth {
        init_block(init, &block_prefix(i), e);
        if cfg.adapter.enabled {
            init.with_group(adapter_group);
            init_adapter(init, &adapter_prefix(i), &acfg);
            init.with_group(base_group);
        }
    }
    init_neck(init, d, e.neck_dim);
}

fn init_neck(init: &mut Init<'_>, d: usize, out: usize) {
    init.conv(&format!("{ENCODER}.neck.0"), d, out, 1, 1, false);
    init.norm(&format!("{ENCODER}.neck.1"), out);
    init.conv(&format!("{ENCODER}.neck.2"), out, out, 3, 1, false);
    init.norm(&format!("{ENCODER}.neck.3"), out);
}

/// Intermediate and final token maps, each `[N, H, W, D]`.
pub struct EncoderOutput<'g> {
    pub taps: Vec<Var<'g>>,
    pub last: Var<'g>,
}

impl<'g> EncoderOutput<'g> {
    /// Taps in channel-first layout.
    pub fn taps_nchw(&self) -> Vec<Var<'g>> {
        self.taps.iter().map(to_nchw).collect()
    }

    pub fn last_nchw(&self) -> Var<'g> {
        to_nchw(&self.last)
    }
}

pub fn to_nchw<'g>(x: &Var<'g>) -> Var<'g> {
    x.permute(&[0, 3, 1, 2])
}

/// Patch-embeds `[N, 3, H, W]` images, adds the (resized if needed)
/// positional embedding and runs every layer, recording the taps.
pub fn encoder_forward<'g>(f: &Fwd<'g, '_>, cfg: &ModelConfig, image: &Var<'g>) -> Result<EncoderOutput<'g>> {
    let e = &cfg.encoder;
    let [n, c, h, w] = *image.shape() else {
        return Err(Error::Input(format!("image batch must be [N, 3, H, W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::Input(format!("expected 3 image channels, got {c}")));
    }
    let p = e.patch_size;
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::Input(format!("input size {h}x{w} is not divisible by the patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let x = conv(f, &format!("{ENCODER}.patch_embed.proj"), image, Conv2dSpec::patch(p))?;
    let pos = f.param(&format!("{ENCODER}.pos_embed"))?;
    let pos = if pos.shape()[1..3] == [gh, gw] {
        pos
    } else {
        pos.permute(&[0, 3, 1, 2]).resize_bilinear(gh, gw).permute(&[0, 2, 3, 1])
    };
    let mut x = x.permute(&[0, 2, 3, 1]).add(&pos.broadcast_leading(n));
    let acfg = cfg.adapter.enabled.then(|| cfg.adapter_config());
    let mut taps = Vec::with_capacity(e.taps.len());
    for i in 0..e.depth {
        x = transformer_layer_forward(f, &block_prefix(i), e, acfg.as_ref(), &x)?;
        if e.taps.contains(&(i + 1)) {
            taps.push(x.clone());
        }
    }
    Ok(EncoderOutput { taps, last: x })
}

/// Convolutional neck mapping a `[N, D, H, W]` embedding to the decoder
/// width.
pub fn neck_forward<'g>(f: &Fwd<'g, '_>, x: &Var<'g>) -> Result<Var<'g>> {
    let y = conv_nobias(f, &format!("{ENCODER}.neck.0"), x, Conv2dSpec::pointwise())?;
    let y = layer_norm2d(f, &format!("{ENCODER}.neck.1"), &y, ENCODER_LN_EPS)?;
    let y = conv_nobias(f, &format!("{ENCODER}.neck.2"), &y, Conv2dSpec::same(1))?;
    layer_norm2d(f, &format!("{ENCODER}.neck.3"), &y, ENCODER_LN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GradScope, ParamGroup, ParamStore};
    use mdsam_autograd::{Graph, Tensor};

    fn adapter_store(cfg: &AdapterConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_adapter(&mut Init::new(&mut s, seed, ParamGroup::New), "ad", cfg);
        s
    }

    #[test]
    fn sam_b_adapter_count() {
        let cfg = ModelConfig::sam_b().adapter_config();
        assert_eq!(adapter_param_count(&cfg), 596_480);
        assert_eq!(adapter_store(&cfg, 0).count(None), 596_480);
    }

    #[test]
    fn zero_up_is_identity() {
        let cfg = AdapterConfig::new(8, 2, vec![1, 2, 3, 4]);
        let s = adapter_store(&cfg, 1);
        let g = Graph::no_grad();
        let f = Fwd::new(&g, &s, false, GradScope::None);
        let x = g.constant(Tensor::from_fn(&[2, 4, 4, 8], |i| (i as f64 * 0.37).sin()));
        let y = lmsa_forward(&f, "ad", &cfg, &x).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn scales_above_grid_repeat_cells() {
        let mut cfg = AdapterConfig::new(8, 2, vec![1, 2, 3, 4]);
        cfg.zero_init_up = false;
        let s = adapter_store(&cfg, 1);
        let g = Graph::no_grad();
        let f = Fwd::eval(&g, &s);
        let x = g.constant(Tensor::from_fn(&[1, 1, 2, 8], |i| i as f64 / 8.0));
        let y = lmsa_forward(&f, "ad", &cfg, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 8]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn rejects_param_config_mismatch() {
        let s = adapter_store(&AdapterConfig::new(8, 2, vec![1, 2, 3, 4]), 1);
        let g = Graph::no_grad();
        let f = Fwd::eval(&g, &s);
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 16]));
        let cfg = AdapterConfig::new(16, 2, vec![1, 2, 3, 4]);
        assert!(matches!(lmsa_forward(&f, "ad", &cfg, &x), Err(Error::Config(_))));
    }
}
