//! Prompt-free two-way transformer mask decoder.
//!
//! The sparse prompt set is empty and the dense prompt is zero, so the
//! only query is the learned mask token. Its final state modulates the
//! 4x-upscaled image embedding per channel, giving the mask feature `f_m`;
//! a 1x1 convolution of `f_m` gives the coarse logit `s_m`.

use std::f64::consts::PI;

use mdsam_autograd::{Tensor, Var};

use crate::config::DecoderConfig;
use crate::error::{config_err, Result};
use crate::layers::{conv1x1, layer_norm, layer_norm2d, linear, multi_head};
use crate::params::{Fwd, Init, ParamGroup};

pub const DECODER: &str = "mask_decoder";
pub const PE_GAUSSIAN: &str = "prompt_encoder.pe_layer.positional_encoding_gaussian_matrix";
pub const MASK_HEAD: &str = "mask_decoder.mask_head";
const LN_EPS: f64 = 1e-5;
const LN2D_EPS: f64 = 1e-6;

fn init_attention(init: &mut Init<'_>, prefix: &str, dim: usize, internal: usize) {
    init.linear(&format!("{prefix}.q_proj"), dim, internal, true);
    init.linear(&format!("{prefix}.k_proj"), dim, internal, true);
    init.linear(&format!("{prefix}.v_proj"), dim, internal, true);
    init.linear(&format!("{prefix}.out_proj"), internal, dim, true);
}

/// Registers the decoder. Transformer, token, upscaling and hypernetwork
/// weights take the init's current group; the mask head goes to `head_group`
/// and starts as an all-ones channel sum.
pub fn init_decoder(init: &mut Init<'_>, cfg: &DecoderConfig, head_group: ParamGroup) {
    let (d, ds) = (cfg.dim, cfg.dim / cfg.attn_downsample);
    let t = format!("{DECODER}.transformer");
    for i in 0..cfg.depth {
        let p = format!("{t}.layers.{i}");
        init_attention(init, &format!("{p}.self_attn"), d, d);
        init.norm(&format!("{p}.norm1"), d);
        init_attention(init, &format!("{p}.cross_attn_token_to_image"), d, ds);
        init.norm(&format!("{p}.norm2"), d);
        init.linear(&format!("{p}.mlp.lin1"), d, cfg.mlp_dim, true);
        init.linear(&format!("{p}.mlp.lin2"), cfg.mlp_dim, d, true);
        init.norm(&format!("{p}.norm3"), d);
        init.norm(&format!("{p}.norm4"), d);
        init_attention(init, &format!("{p}.cross_attn_image_to_token"), d, ds);
    }
    init_attention(init, &format!("{t}.final_attn_token_to_image"), d, ds);
    init.norm(&format!("{t}.norm_final_attn"), d);
    init.normal(&format!("{DECODER}.mask_tokens.weight"), &[1, d], 1.0);
    init.conv_transpose(&format!("{DECODER}.output_upscaling.0"), d, d / 4, 2);
    init.norm(&format!("{DECODER}.output_upscaling.1"), d / 4);
    init.conv_transpose(&format!("{DECODER}.output_upscaling.3"), d / 4, d / 8, 2);
    let h = format!("{DECODER}.output_hypernetworks_mlps.0.layers");
    init.linear(&format!("{h}.0"), d, d, true);
    init.linear(&format!("{h}.1"), d, d, true);
    init.linear(&format!("{h}.2"), d, d / 8, true);
    init.normal_buffer(PE_GAUSSIAN, &[2, d / 2], 1.0);
    let group = init.group;
    init.with_group(head_group);
    init.tensor(&format!("{MASK_HEAD}.weight"), Tensor::ones(&[1, d / 8, 1, 1]));
    init.tensor(&format!("{MASK_HEAD}.bias"), Tensor::zeros(&[1]));
    init.with_group(group);
}

/// Dense random-Fourier positional encoding `[dim, h, w]` of a grid, with
/// normalized cell-center coordinates in `[-1, 1]`.
pub fn dense_pe(gaussian: &Tensor, h: usize, w: usize) -> Tensor {
    let half = gaussian.dim(1);
    let g = gaussian.data();
    let mut out = vec![0.0; 2 * half * h * w];
    for y in 0..h {
        let cy = 2.0 * ((y as f64 + 0.5) / h as f64) - 1.0;
        for x in 0..w {
            let cx = 2.0 * ((x as f64 + 0.5) / w as f64) - 1.0;
            for k in 0..half {
                let v = 2.0 * PI * (cx * g[k] + cy * g[half + k]);
                out[(k * h + y) * w + x] = v.sin();
                out[((half + k) * h + y) * w + x] = v.cos();
            }
        }
    }
    Tensor::new(vec![2 * half, h, w], out)
}

fn attention<'g>(f: &Fwd<'g, '_>, prefix: &str, q: &Var<'g>, k: &Var<'g>, v: &Var<'g>, heads: usize) -> Result<Var<'g>> {
    let q = linear(f, &format!("{prefix}.q_proj"), q)?;
    let k = linear(f, &format!("{prefix}.k_proj"), k)?;
    let v = linear(f, &format!("{prefix}.v_proj"), v)?;
    linear(f, &format!("{prefix}.out_proj"), &multi_head(&q, &k, &v, heads))
}

/// Decoder outputs at 4x the embedding resolution.
pub struct DecoderFeatures<'g> {
    /// `[N, dim / 8, 4h, 4w]` mask feature.
    pub f_m: Var<'g>,
    /// `[N, 1, 4h, 4w]` coarse saliency logit.
    pub s_m: Var<'g>,
}

/// Decodes a `[N, dim, h, w]` image embedding.
pub fn decode<'g>(f: &Fwd<'g, '_>, cfg: &DecoderConfig, embedding: &Var<'g>) -> Result<DecoderFeatures<'g>> {
    let [n, c, h, w] = *embedding.shape() else {
        return Err(config_err(format!("decoder input must be [N, C, H, W], got {:?}", embedding.shape())));
    };
    if c != cfg.dim {
        return Err(config_err(format!("decoder expects {} channels, embedding has {c}", cfg.dim)));
    }
    let d = cfg.dim;
    let graph = f.graph();
    let pe = dense_pe(f.buffer(PE_GAUSSIAN)?, h, w).reshape(&[1, d, h * w]).permute(&[0, 2, 1]);
    let key_pe = graph.constant(pe).broadcast_leading(n);
    let mut keys = embedding.reshape(&[n, d, h * w]).permute(&[0, 2, 1]);
    let query_pe = f.param(&format!("{DECODER}.mask_tokens.weight"))?.reshape(&[1, 1, d]).broadcast_leading(n);
    let mut queries = query_pe.clone();

    let t = format!("{DECODER}.transformer");
    for i in 0..cfg.depth {
        let p = format!("{t}.layers.{i}");
        let heads = cfg.num_heads;
        queries = if i == 0 {
            attention(f, &format!("{p}.self_attn"), &queries, &queries, &queries, heads)?
        } else {
            let q = queries.add(&query_pe);
            attention(f, &format!("{p}.self_attn"), &q, &q, &queries, heads)?.add(&queries)
        };
        queries = layer_norm(f, &format!("{p}.norm1"), &queries, LN_EPS)?;

        let q = queries.add(&query_pe);
        let k = keys.add(&key_pe);
        let a = attention(f, &format!("{p}.cross_attn_token_to_image"), &q, &k, &keys, heads)?;
        queries = layer_norm(f, &format!("{p}.norm2"), &queries.add(&a), LN_EPS)?;

        let m = linear(f, &format!("{p}.mlp.lin1"), &queries)?.relu();
        let m = linear(f, &format!("{p}.mlp.lin2"), &m)?;
        queries = layer_norm(f, &format!("{p}.norm3"), &queries.add(&m), LN_EPS)?;

        let q = queries.add(&query_pe);
        let a = attention(f, &format!("{p}.cross_attn_image_to_token"), &k, &q, &queries, heads)?;
        keys = layer_norm(f, &format!("{p}.norm4"), &keys.add(&a), LN_EPS)?;
    }
    let q = queries.add(&query_pe);
    let k = keys.add(&key_pe);
    let a = attention(f, &format!("{t}.final_attn_token_to_image"), &q, &k, &keys, cfg.num_heads)?;
    let queries = layer_norm(f, &format!("{t}.norm_final_attn"), &queries.add(&a), LN_EPS)?;

    let src = keys.permute(&[0, 2, 1]).reshape(&[n, d, h, w]);
    let up = |name: &str, x: &Var<'g>| -> Result<Var<'g>> {
        let wt = f.param(&format!("{DECODER}.output_upscaling.{name}.weight"))?;
        let b = f.param(&format!("{DECODER}.output_upscaling.{name}.bias"))?;
        Ok(x.conv_transpose2d(&wt, Some(&b)))
    };
    let u = up("0", &src)?;
    let u = layer_norm2d(f, &format!("{DECODER}.output_upscaling.1"), &u, LN2D_EPS)?.gelu();
    let upscaled = up("3", &u)?.gelu();

    let hp = format!("{DECODER}.output_hypernetworks_mlps.0.layers");
    let token = queries.reshape(&[n, d]);
    let hyper = linear(f, &format!("{hp}.0"), &token)?.relu();
    let hyper = linear(f, &format!("{hp}.1"), &hyper)?.relu();
    let hyper = linear(f, &format!("{hp}.2"), &hyper)?;

    let f_m = upscaled.mul_channel(&hyper);
    let s_m = conv1x1(f, MASK_HEAD, &f_m)?;
    Ok(DecoderFeatures { f_m, s_m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use mdsam_autograd::Graph;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_dim: 32,
            attn_downsample: 2,
        }
    }

    #[test]
    fn sam_sized_decoder_count() {
        let mut s = ParamStore::new();
        init_decoder(&mut Init::new(&mut s, 0, ParamGroup::Pretrained), &crate::config::ModelConfig::sam_b().decoder, ParamGroup::New);
        assert_eq!(s.count(None), 3_505_313);
    }

    #[test]
    fn output_is_4x_and_deterministic() {
        let mut s = ParamStore::new();
        init_decoder(&mut Init::new(&mut s, 3, ParamGroup::Pretrained), &cfg(), ParamGroup::New);
        let run = || {
            let g = Graph::no_grad();
            let f = Fwd::eval(&g, &s);
            let e = g.constant(Tensor::from_fn(&[2, 16, 3, 4], |i| (i as f64 * 0.11).cos()));
            let out = decode(&f, &cfg(), &e).unwrap();
            assert_eq!(out.f_m.shape(), &[2, 2, 12, 16]);
            assert_eq!(out.s_m.shape(), &[2, 1, 12, 16]);
            out.s_m.value().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut s = ParamStore::new();
        init_decoder(&mut Init::new(&mut s, 3, ParamGroup::Pretrained), &cfg(), ParamGroup::New);
        let g = Graph::no_grad();
        let f = Fwd::eval(&g, &s);
        let e = g.constant(Tensor::zeros(&[1, 8, 2, 2]));
        assert!(matches!(decode(&f, &cfg(), &e), Err(crate::Error::Config(_))));
    }

    #[test]
    fn pe_is_bounded() {
        let pe = dense_pe(&Tensor::from_fn(&[2, 4], |i| i as f64 - 3.0), 3, 5);
        assert_eq!(pe.shape(), &[8, 3, 5]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }
}
