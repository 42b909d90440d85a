//! Training objective in probability space: BCE + soft IoU + L1 per
//! output, summed over the final and coarse outputs.
//!
//! Predictions and targets are `[N, ...]` with the batch on axis 0.

use mdsam_autograd::Var;

use crate::error::{shape_err, Result};

pub const BCE_EPS: f64 = 1e-7;

fn check_pair(pred: &Var<'_>, gt: &Var<'_>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    if pred.shape().is_empty() {
        return Err(shape_err("loss needs a batch axis"));
    }
    Ok(())
}

/// Mean binary cross entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss<'g>(pred: &Var<'g>, gt: &Var<'g>) -> Result<Var<'g>> {
    check_pair(pred, gt)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = gt.mul(&p.ln());
    let neg = gt.rsub_scalar(1.0).mul(&p.rsub_scalar(1.0).ln());
    Ok(pos.add(&neg).mean().neg())
}

/// `1 - (sum pg + 1) / (sum p + sum g - sum pg + 1)` per image, averaged
/// over the batch.
pub fn iou_loss<'g>(pred: &Var<'g>, gt: &Var<'g>) -> Result<Var<'g>> {
    check_pair(pred, gt)?;
    let inter = pred.mul(gt).sum_trailing(1);
    let union = pred.sum_trailing(1).add(&gt.sum_trailing(1)).sub(&inter);
    let iou = inter.add_scalar(1.0).div(&union.add_scalar(1.0));
    Ok(iou.mean().rsub_scalar(1.0))
}

/// Mean absolute difference.
pub fn l1_loss<'g>(pred: &Var<'g>, gt: &Var<'g>) -> Result<Var<'g>> {
    check_pair(pred, gt)?;
    Ok(pred.sub(gt).abs().mean())
}

/// Individual terms of [`composite_loss`].
pub struct Composite<'g> {
    pub bce: Var<'g>,
    pub iou: Var<'g>,
    pub l1: Var<'g>,
    pub total: Var<'g>,
}

pub fn composite_terms<'g>(pred: &Var<'g>, gt: &Var<'g>) -> Result<Composite<'g>> {
    let bce = bce_loss(pred, gt)?;
    let iou = iou_loss(pred, gt)?;
    let l1 = l1_loss(pred, gt)?;
    let total = bce.add(&iou).add(&l1);
    Ok(Composite { bce, iou, l1, total })
}

/// Unweighted `bce + iou + l1`.
pub fn composite_loss<'g>(pred: &Var<'g>, gt: &Var<'g>) -> Result<Var<'g>> {
    Ok(composite_terms(pred, gt)?.total)
}

/// Scalar breakdown of a [`total_loss`] evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub bce_f: f64,
    pub iou_f: f64,
    pub l1_f: f64,
    pub bce_m: f64,
    pub iou_m: f64,
    pub l1_m: f64,
}

/// `composite(s_f, gt) + composite(up(s_m), gt)`, where `up` bilinearly
/// resizes the coarse prediction to the target resolution. Without `s_m`
/// only the first term is used. All maps are `[N, 1, H, W]` probabilities.
pub fn total_loss<'g>(s_f: &Var<'g>, s_m: Option<&Var<'g>>, gt: &Var<'g>) -> Result<(Var<'g>, LossTerms)> {
    let fin = composite_terms(s_f, gt)?;
    let mut terms = LossTerms {
        bce_f: fin.bce.value().item(),
        iou_f: fin.iou.value().item(),
        l1_f: fin.l1.value().item(),
        ..LossTerms::default()
    };
    let total = match s_m {
        Some(m) => {
            if m.shape().len() != 4 || gt.shape().len() != 4 || m.shape()[..2] != gt.shape()[..2] {
                return Err(shape_err(format!("coarse output {:?} vs target {:?}", m.shape(), gt.shape())));
            }
            let up = m.resize_bilinear(gt.shape()[2], gt.shape()[3]);
            let coarse = composite_terms(&up, gt)?;
            terms.bce_m = coarse.bce.value().item();
            terms.iou_m = coarse.iou.value().item();
            terms.l1_m = coarse.l1.value().item();
            fin.total.add(&coarse.total)
        }
        None => fin.total,
    };
    terms.total = total.value().item();
    Ok((total, terms))
}
