//! Multi-level fusion of encoder taps with per-tap channel gates.
//!
//! All maps here are channel-first `[N, D, H, W]`.

use mdsam_autograd::Var;

use crate::config::MlfmMode;
use crate::error::{shape_err, Result};
use crate::layers::conv1x1;
use crate::params::{Fwd, Init};

pub const MLFM: &str = "mlfm";

pub fn init_mlfm(init: &mut Init<'_>, d: usize, taps: usize) {
    init.conv(&format!("{MLFM}.aggregate"), taps * d, d, 1, 1, true);
    for g in 0..taps {
        init.conv(&format!("{MLFM}.wd.{g}"), d, d, 1, 1, true);
    }
}

fn check_taps(taps: &[Var<'_>]) -> Result<()> {
    let first = taps.first().ok_or_else(|| shape_err("empty tap set"))?;
    if first.shape().len() != 4 {
        return Err(shape_err(format!("taps must be [N, D, H, W], got {:?}", first.shape())));
    }
    if let Some(t) = taps.iter().find(|t| t.shape() != first.shape()) {
        return Err(shape_err(format!("tap shapes differ: {:?} vs {:?}", t.shape(), first.shape())));
    }
    Ok(())
}

/// 1x1 convolution of the channel-wise concatenation of all taps.
pub fn aggregate<'g>(f: &Fwd<'g, '_>, taps: &[Var<'g>]) -> Result<Var<'g>> {
    check_taps(taps)?;
    conv1x1(f, &format!("{MLFM}.aggregate"), &Var::concat(taps, 1))
}

/// One gate vector `[N, D]` per tap: sigmoid of the spatial mean of a
/// tap-specific 1x1 convolution of the aggregate.
pub fn distribute_weights<'g>(f: &Fwd<'g, '_>, xc: &Var<'g>, taps: usize) -> Result<Vec<Var<'g>>> {
    if xc.shape().len() != 4 {
        return Err(shape_err(format!("aggregate must be [N, D, H, W], got {:?}", xc.shape())));
    }
    (0..taps)
        .map(|g| Ok(conv1x1(f, &format!("{MLFM}.wd.{g}"), xc)?.mean_trailing(2).sigmoid()))
        .collect()
}

/// `sum_g (P_g * X_g + X_g)` with `P_g` broadcast over positions.
pub fn fuse<'g>(taps: &[Var<'g>], weights: &[Var<'g>]) -> Result<Var<'g>> {
    check_taps(taps)?;
    if taps.len() != weights.len() {
        return Err(shape_err(format!("{} taps but {} weight vectors", taps.len(), weights.len())));
    }
    let (n, d) = (taps[0].shape()[0], taps[0].shape()[1]);
    let mut acc: Option<Var<'g>> = None;
    for (x, p) in taps.iter().zip(weights) {
        if p.shape() != [n, d] {
            return Err(shape_err(format!("weight vector must be [{n}, {d}], got {:?}", p.shape())));
        }
        let term = x.mul_channel(p).add(x);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    Ok(acc.expect("non-empty taps"))
}

/// The aggregate alone, used when the gated fusion is ablated.
pub fn mlfm_concat_variant<'g>(f: &Fwd<'g, '_>, taps: &[Var<'g>]) -> Result<Var<'g>> {
    aggregate(f, taps)
}

/// Image embedding for the decoder under the given fusion mode.
pub fn mlfm_forward<'g>(f: &Fwd<'g, '_>, mode: MlfmMode, taps: &[Var<'g>], last: &Var<'g>) -> Result<Var<'g>> {
    match mode {
        MlfmMode::Off => Ok(last.clone()),
        MlfmMode::Concat => mlfm_concat_variant(f, taps),
        MlfmMode::Full => {
            let xc = aggregate(f, taps)?;
            let weights = distribute_weights(f, &xc, taps.len())?;
            fuse(taps, &weights)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use mdsam_autograd::{Graph, Tensor};

    fn zero_store(d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_mlfm(&mut Init::new(&mut s, 0, ParamGroup::New), d, 4);
        let names: Vec<String> = s.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            s.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        s
    }

    #[test]
    fn zero_convs_give_half_gates() {
        let s = zero_store(3);
        let g = Graph::no_grad();
        let f = Fwd::eval(&g, &s);
        let taps: Vec<_> = (0..4)
            .map(|k| g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| (i + k) as f64)))
            .collect();
        let xc = aggregate(&f, &taps).unwrap();
        assert!(xc.value().data().iter().all(|&v| v == 0.0));
        let w = distribute_weights(&f, &xc, 4).unwrap();
        assert!(w.iter().all(|p| p.value().data().iter().all(|&v| v == 0.5)));
        let out = fuse(&taps, &w).unwrap();
        let sum: Vec<f64> = (0..12).map(|i| (0..4).map(|k| (i + k) as f64).sum::<f64>() * 1.5).collect();
        assert_eq!(out.value().data(), &sum[..]);
    }

    #[test]
    fn mismatched_taps_error() {
        let s = zero_store(3);
        let g = Graph::no_grad();
        let f = Fwd::eval(&g, &s);
        let mut taps: Vec<_> = (0..4).map(|_| g.constant(Tensor::zeros(&[1, 3, 2, 2]))).collect();
        taps[2] = g.constant(Tensor::zeros(&[1, 3, 2, 3]));
        assert!(aggregate(&f, &taps).is_err());
        assert!(fuse(&taps[..2], &[]).is_err());
    }
}
