//! Detail enhancement head.
//!
//! The primary branch lifts decoder features from 1/4 to full resolution;
//! the auxiliary branch extracts local features from the image and a
//! stride-1 average-pooling edge pyramid over them. Their concatenation
//! is reduced to the final logit `s_f`.

use mdsam_autograd::{Conv2dSpec, Var};

use crate::config::{DemConfig, DemMode};
use crate::error::{shape_err, Result};
use crate::layers::{conv, conv1x1, conv1x1_bn_sigmoid, conv_bn_relu, init_conv_bn};
use crate::params::{Fwd, Init};

pub const DEM: &str = "dem";

/// Registers the parameters needed by `mode` (nothing for [`DemMode::Off`]).
pub fn init_dem(init: &mut Init<'_>, cfg: &DemConfig, encoder_dim: usize, mask_channels: usize, mode: DemMode) {
    if mode == DemMode::Off {
        return;
    }
    let c = cfg.local_channels;
    init.conv(&format!("{DEM}.fd"), encoder_dim, cfg.fd_channels, 1, 1, true);
    init.conv(&format!("{DEM}.re"), cfg.fd_channels + mask_channels, cfg.re_channels, 1, 1, true);
    init_conv_bn(init, &format!("{DEM}.up1"), cfg.re_channels, cfg.up_channels, 3);
    init_conv_bn(init, &format!("{DEM}.up2"), cfg.up_channels, cfg.up_channels, 3);
    init_conv_bn(init, &format!("{DEM}.local"), 3, c, 3);
    if mode == DemMode::Full {
        init_meem(init, &format!("{DEM}.meem"), c);
    }
    init_conv_bn(init, &format!("{DEM}.head.0"), cfg.up_channels + c, cfg.head_channels, 3);
    init_conv_bn(init, &format!("{DEM}.head.1"), cfg.head_channels, cfg.head_channels, 3);
    init.conv(&format!("{DEM}.head.2"), cfg.head_channels, 1, 1, 1, true);
}

/// Registers one edge pyramid under `prefix` with `c` channels.
pub fn init_meem(init: &mut Init<'_>, prefix: &str, c: usize) {
    init.conv(&format!("{prefix}.e0"), c, c, 1, 1, true);
    for t in 0..3 {
        init_conv_bn(init, &format!("{prefix}.pyramid.{t}"), c, c, 1);
    }
    for l in 0..3 {
        init_edge_enhancer(init, &format!("{prefix}.edge.{l}"), c);
    }
    init.conv(&format!("{prefix}.fuse"), 4 * c, c, 1, 1, true);
}

pub fn init_edge_enhancer(init: &mut Init<'_>, prefix: &str, c: usize) {
    init_conv_bn(init, prefix, c, c, 1);
}

/// Bilinear upsample of the last encoder map `[N, D, h, w]` to `size` and
/// 1x1 projection.
pub fn project_fd<'g>(f: &Fwd<'g, '_>, last: &Var<'g>, size: (usize, usize)) -> Result<Var<'g>> {
    if last.shape().len() != 4 {
        return Err(shape_err(format!("encoder map must be [N, D, H, W], got {:?}", last.shape())));
    }
    conv1x1(f, &format!("{DEM}.fd"), &last.resize_bilinear(size.0, size.1))
}

/// Upsamples `concat(f_d, f_m)` by 4 through two bilinear x2 steps, each
/// followed by conv3x3 + BN + ReLU.
pub fn primary_branch<'g>(f: &Fwd<'g, '_>, f_m: &Var<'g>, f_d: &Var<'g>) -> Result<Var<'g>> {
    if f_m.shape().len() != 4 || f_d.shape().len() != 4 || f_m.shape()[2..] != f_d.shape()[2..] || f_m.shape()[0] != f_d.shape()[0] {
        return Err(shape_err(format!(
            "f_m {:?} and f_d {:?} must share batch and resolution",
            f_m.shape(),
            f_d.shape()
        )));
    }
    let (h, w) = (f_m.shape()[2], f_m.shape()[3]);
    let re = conv1x1(f, &format!("{DEM}.re"), &Var::concat(&[f_d.clone(), f_m.clone()], 1))?;
    let x = conv_bn_relu(f, &format!("{DEM}.up1"), &re.resize_bilinear(2 * h, 2 * w))?;
    conv_bn_relu(f, &format!("{DEM}.up2"), &x.resize_bilinear(4 * h, 4 * w))
}

/// conv3x3 + BN + ReLU on the normalized image.
pub fn local_extract<'g>(f: &Fwd<'g, '_>, image: &Var<'g>) -> Result<Var<'g>> {
    conv_bn_relu(f, &format!("{DEM}.local"), image)
}

/// `phi'(x - AP(x)) + x`, with `phi'` = 1x1 conv + BN + sigmoid and `AP`
/// the pad-exclusive 3x3 stride-1 average pool.
pub fn edge_enhance<'g>(f: &Fwd<'g, '_>, prefix: &str, x: &Var<'g>) -> Result<Var<'g>> {
    let edge = x.sub(&x.avg_pool3_same());
    Ok(conv1x1_bn_sigmoid(f, prefix, &edge)?.add(x))
}

/// Edge pyramid over `f_local`: four same-resolution levels, the upper
/// three edge-enhanced, fused by a 1x1 convolution.
pub fn meem<'g>(f: &Fwd<'g, '_>, prefix: &str, f_local: &Var<'g>) -> Result<Var<'g>> {
    let e0 = conv1x1(f, &format!("{prefix}.e0"), f_local)?;
    let mut levels = vec![e0.clone()];
    let mut e = e0;
    for t in 0..3 {
        e = conv1x1_bn_sigmoid(f, &format!("{prefix}.pyramid.{t}"), &e)?.avg_pool3_same();
        levels.push(edge_enhance(f, &format!("{prefix}.edge.{t}"), &e)?);
    }
    conv1x1(f, &format!("{prefix}.fuse"), &Var::concat(&levels, 1))
}

/// Final logit and the intermediate maps that produced it.
pub struct DemOutput<'g> {
    /// `[N, 1, H, W]` logit at input resolution.
    pub s_f: Var<'g>,
    pub f_up: Option<Var<'g>>,
    pub f_local: Option<Var<'g>>,
    pub f_me: Option<Var<'g>>,
    pub f_de: Option<Var<'g>>,
}

/// Runs the detail head. `s_m` is only used when `mode` is off, in which
/// case it is bilinearly upsampled to the image size.
pub fn dem_forward<'g>(
    f: &Fwd<'g, '_>,
    mode: DemMode,
    image: &Var<'g>,
    f_m: &Var<'g>,
    f_d: Option<&Var<'g>>,
    s_m: &Var<'g>,
) -> Result<DemOutput<'g>> {
    let [_, _, h, w] = *image.shape() else {
        return Err(shape_err(format!("image must be [N, 3, H, W], got {:?}", image.shape())));
    };
    if mode == DemMode::Off {
        return Ok(DemOutput {
            s_f: s_m.resize_bilinear(h, w),
            f_up: None,
            f_local: None,
            f_me: None,
            f_de: None,
        });
    }
    let f_d = f_d.ok_or_else(|| shape_err("detail head needs the projected encoder feature"))?;
    let f_up = primary_branch(f, f_m, f_d)?;
    if f_up.shape()[2..] != [h, w] {
        return Err(shape_err(format!(
            "primary branch lands at {:?}, image is {h}x{w}",
            &f_up.shape()[2..]
        )));
    }
    let f_local = local_extract(f, image)?;
    let (aux, f_me) = match mode {
        DemMode::Full => {
            let me = meem(f, &format!("{DEM}.meem"), &f_local)?;
            (me.add(&f_local), Some(me))
        }
        _ => (f_local.clone(), None),
    };
    let f_de = Var::concat(&[f_up.clone(), aux], 1);
    let x = conv_bn_relu(f, &format!("{DEM}.head.0"), &f_de)?;
    let x = conv_bn_relu(f, &format!("{DEM}.head.1"), &x)?;
    let s_f = conv(f, &format!("{DEM}.head.2"), &x, Conv2dSpec::pointwise())?;
    Ok(DemOutput {
        s_f,
        f_up: Some(f_up),
        f_local: Some(f_local),
        f_me,
        f_de: Some(f_de),
    })
}
