//! Gradient checks of the model's building blocks against central finite
//! differences (double precision). Each case returns its worst relative
//! error; callers compare it against [`TOL`].

use super::{binary, project, uniform};
use mdsam_autograd::gradcheck::{check, worst};
use mdsam_autograd::{Graph, Tensor, Var};
use mdsam_core::config::{AdapterConfig, DemConfig, DemMode, EncoderConfig};
use mdsam_core::dem::{dem_forward, edge_enhance, init_dem, init_edge_enhancer, init_meem, meem};
use mdsam_core::encoder::{init_adapter, init_block, lmsa_forward, transformer_layer_forward};
use mdsam_core::fusion::fuse;
use mdsam_core::losses::{bce_loss, composite_loss, iou_loss, l1_loss, total_loss};
use mdsam_core::params::{Fwd, GradScope, Init, ParamGroup, ParamStore};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Runs a gradient check where `inputs[..k]` are free inputs and the rest
/// bind the named parameters.
fn check_module(
    store: &ParamStore,
    train: bool,
    free: Vec<Tensor>,
    params: &[&str],
    f: impl for<'g> Fn(&Fwd<'g, '_>, &[Var<'g>]) -> Var<'g>,
) -> f64 {
    let k = free.len();
    let mut inputs = free;
    for p in params {
        inputs.push(store.get(p).unwrap().clone());
    }
    let reports = check(&inputs, STEP, |g: &Graph, vars: &[Var<'_>]| {
        let mut fwd = Fwd::new(g, store, train, GradScope::None);
        for (name, v) in params.iter().zip(&vars[k..]) {
            fwd = fwd.bind(name, v.clone());
        }
        f(&fwd, &vars[..k])
    });
    // A parameter followed by training-mode batch norm (a conv bias) has an
    // exactly zero gradient; its numeric estimate is pure round-off, so it is
    // compared in absolute terms instead; a miss counts as an infinite error.
    let (zero, rest): (Vec<_>, Vec<_>) = reports.into_iter().partition(|r| r.analytic_norm < 1e-9);
    if zero.iter().any(|r| r.max_abs_err >= 1e-8) {
        return f64::INFINITY;
    }
    worst(&rest)
}

fn adapter_cfg() -> AdapterConfig {
    let mut cfg = AdapterConfig::new(16, 2, vec![1, 2, 3, 4]);
    cfg.zero_init_up = false;
    cfg
}

pub fn lmsa_forward_gradients() -> f64 {
    let cfg = adapter_cfg();
    let mut store = ParamStore::new();
    init_adapter(&mut Init::new(&mut store, 11, ParamGroup::New), "a", &cfg);
    let x = uniform(&[1, 4, 4, 16], -1.0, 1.0, 1);
    let params = [
        "a.down.weight",
        "a.down.bias",
        "a.branches.0.proj.weight",
        "a.branches.3.dw.weight",
        "a.local_dw.weight",
        "a.fuse.weight",
        "a.up.weight",
    ];
    check_module(&store, true, vec![x], &params, |f, v| {
        project(f.graph(), &lmsa_forward(f, "a", &cfg, &v[0]).unwrap(), 2)
    })
}

pub fn transformer_layer_gradients() -> f64 {
    let enc = EncoderConfig {
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        mlp_dim: 32,
        patch_size: 16,
        taps: vec![1],
        neck_dim: 16,
    };
    let cfg = adapter_cfg();
    let mut store = ParamStore::new();
    {
        let mut init = Init::new(&mut store, 5, ParamGroup::Frozen);
        init_block(&mut init, "b", &enc);
        init.with_group(ParamGroup::New);
        init_adapter(&mut init, "b.adapter", &cfg);
    }
    let x = uniform(&[1, 4, 4, 16], -1.0, 1.0, 3);
    let params = [
        "b.norm1.weight",
        "b.attn.qkv.weight",
        "b.attn.proj.bias",
        "b.mlp.lin1.weight",
        "b.adapter.down.weight",
        "b.adapter.up.weight",
    ];
    check_module(&store, true, vec![x], &params, |f, v| {
        project(f.graph(), &transformer_layer_forward(f, "b", &enc, Some(&cfg), &v[0]).unwrap(), 4)
    })
}

pub fn fuse_gradients() -> f64 {
    let store = ParamStore::new();
    let mut free: Vec<Tensor> = (0..4).map(|i| uniform(&[2, 3, 2, 2], -1.0, 1.0, 10 + i)).collect();
    free.extend((0..4).map(|i| uniform(&[2, 3], 0.0, 1.0, 20 + i)));
    check_module(&store, false, free, &[], |f, v| project(f.graph(), &fuse(&v[..4], &v[4..]).unwrap(), 6))
}

pub fn edge_enhance_gradients() -> f64 {
    let mut store = ParamStore::new();
    init_edge_enhancer(&mut Init::new(&mut store, 8, ParamGroup::New), "e", 3);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, 7);
    let params = ["e.conv.weight", "e.conv.bias", "e.bn.weight", "e.bn.bias"];
    [true, false]
        .into_iter()
        .map(|train| {
            check_module(&store, train, vec![x.clone()], &params, |f, v| {
                project(f.graph(), &edge_enhance(f, "e", &v[0]).unwrap(), 9)
            })
        })
        .fold(0.0, f64::max)
}

pub fn meem_gradients() -> f64 {
    let mut store = ParamStore::new();
    init_meem(&mut Init::new(&mut store, 12, ParamGroup::New), "m", 3);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, 13);
    let params = [
        "m.e0.weight",
        "m.pyramid.0.conv.weight",
        "m.pyramid.2.bn.weight",
        "m.edge.1.conv.weight",
        "m.fuse.weight",
        "m.fuse.bias",
    ];
    check_module(&store, true, vec![x], &params, |f, v| project(f.graph(), &meem(f, "m", &v[0]).unwrap(), 14))
}

pub fn dem_forward_gradients() -> f64 {
    let cfg = DemConfig {
        local_channels: 3,
        fd_channels: 3,
        re_channels: 3,
        up_channels: 3,
        head_channels: 3,
    };
    let mut store = ParamStore::new();
    init_dem(&mut Init::new(&mut store, 21, ParamGroup::New), &cfg, 8, 2, DemMode::Full);
    let image = uniform(&[2, 3, 8, 8], -1.0, 1.0, 22);
    let f_m = uniform(&[2, 2, 2, 2], -1.0, 1.0, 23);
    let f_d = uniform(&[2, 3, 2, 2], -1.0, 1.0, 24);
    let s_m = uniform(&[2, 1, 2, 2], -1.0, 1.0, 25);
    let params = [
        "dem.re.weight",
        "dem.up1.conv.weight",
        "dem.local.conv.weight",
        "dem.meem.fuse.weight",
        "dem.head.0.bn.weight",
        "dem.head.2.weight",
    ];
    check_module(&store, true, vec![image, f_m, f_d, s_m], &params, |f, v| {
        let out = dem_forward(f, DemMode::Full, &v[0], &v[1], Some(&v[2]), &v[3]).unwrap();
        project(f.graph(), &out.s_f, 26)
    })
}

fn loss_inputs() -> (Tensor, Tensor) {
    (uniform(&[2, 1, 4, 4], 0.05, 0.95, 31), binary(&[2, 1, 4, 4], 0.4, 32))
}

pub fn loss_gradients() -> f64 {
    let (pred, gt) = loss_inputs();
    type LossFn = for<'g> fn(&Var<'g>, &Var<'g>) -> mdsam_core::Result<Var<'g>>;
    let losses: [LossFn; 4] = [bce_loss, iou_loss, l1_loss, composite_loss];
    let mut worst_err = 0.0f64;
    for loss in losses {
        let gt = gt.clone();
        let reports = check(std::slice::from_ref(&pred), STEP, move |g: &Graph, v: &[Var<'_>]| {
            loss(&v[0], &g.constant(gt.clone())).unwrap()
        });
        worst_err = worst_err.max(worst(&reports));
    }
    worst_err
}

pub fn total_loss_gradients() -> f64 {
    let (pred, gt) = loss_inputs();
    let coarse = uniform(&[2, 1, 2, 2], 0.05, 0.95, 33);
    let reports = check(&[pred, coarse], STEP, |g: &Graph, v: &[Var<'_>]| {
        total_loss(&v[0], Some(&v[1]), &g.constant(gt.clone())).unwrap().0
    });
    worst(&reports)
}

/// Every case by name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("lmsa", lmsa_forward_gradients()),
        ("transformer_layer", transformer_layer_gradients()),
        ("fuse", fuse_gradients()),
        ("edge_enhance", edge_enhance_gradients()),
        ("meem", meem_gradients()),
        ("dem_forward", dem_forward_gradients()),
        ("losses", loss_gradients()),
        ("total_loss", total_loss_gradients()),
    ]
}
