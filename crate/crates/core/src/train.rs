//! AdamW training with two learning-rate groups, linear warmup, global
//! gradient clipping, per-epoch checkpoints and a per-step loss log.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use mdsam_autograd::{Graph, Tensor};

use crate::checkpoint::{self, AdamState, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{batch, Sample};
use crate::error::{Error, Result};
use crate::layers::BN_MOMENTUM;
use crate::losses::LossTerms;
use crate::model::Model;
use crate::params::{apply_bn_stats, Fwd, GradScope, ParamGroup};

/// File name of the most recent checkpoint inside the output directory.
pub const LATEST: &str = "latest.ckpt";
/// File name of the loss log inside the output directory.
pub const LOSS_LOG: &str = "loss.csv";

pub const LOSS_HEADER: [&str; 12] = [
    "step",
    "epoch",
    "lr_pretrained",
    "lr_new",
    "total",
    "bce_f",
    "iou_f",
    "l1_f",
    "bce_m",
    "iou_m",
    "l1_m",
    "grad_norm",
];

/// Run-level knobs that are not part of the training recipe.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and the loss log go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint: parameters, moments, epoch and step.
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub terms: LossTerms,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean step loss of each epoch run in this call.
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepLog>,
    /// Completed epochs, counting any resumed ones.
    pub epochs_done: usize,
    pub checkpoints: Vec<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

/// Learning-rate multiplier at 1-based step `step`: `step / warmup_steps`
/// during warmup, then 1.
pub fn warmup_factor(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        step as f64 / warmup_steps as f64
    }
}

/// Data-order seed of epoch `epoch` (0-based).
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

fn group_lr(group: ParamGroup, tcfg: &TrainConfig) -> f64 {
    match group {
        ParamGroup::Pretrained => tcfg.lr_pretrained,
        ParamGroup::New => tcfg.lr_new,
        ParamGroup::Frozen => 0.0,
    }
}

/// One decoupled-weight-decay Adam update of `param` in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    tcfg: &TrainConfig,
) {
    let (b1, b2) = (tcfg.beta1, tcfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let p = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i];
        p[i] -= lr * tcfg.weight_decay * p[i];
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let mhat = md[i] / c1;
        let vhat = vd[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + tcfg.adam_eps);
    }
}

fn write_step(w: &mut impl Write, s: &StepLog) -> std::io::Result<()> {
    let t = &s.terms;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        s.step, s.epoch, s.lr_pretrained, s.lr_new, t.total, t.bce_f, t.iou_f, t.l1_f, t.bce_m, t.iou_m, t.l1_m, s.grad_norm
    )
}

/// Trains `model` on `samples` following `tcfg`.
///
/// Only non-frozen parameters are updated; batch-norm running statistics
/// are folded in after every step. A non-finite loss or gradient aborts
/// with the step, learning rates and gradient norm.
pub fn train(model: &mut Model, samples: &[Sample], tcfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut adam = AdamState::default();
    let mut start_epoch = 0usize;
    if let Some(path) = &opts.resume {
        let ck = checkpoint::load(path)?;
        if ck.model_config != model.cfg {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            )));
        }
        model.store = ck.store;
        adam = ck.adam.unwrap_or_default();
        start_epoch = ck.epoch;
        log::info!("resuming from {} at epoch {start_epoch}, step {}", path.display(), adam.t);
    }

    let mut report = TrainReport {
        epochs_done: start_epoch,
        ..TrainReport::default()
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(LOSS_LOG);
            let fresh = opts.resume.is_none() || !path.exists();
            let mut f = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
            if fresh {
                writeln!(f, "# config_hash={}", model.cfg.hash())?;
                writeln!(f, "{}", LOSS_HEADER.join(","))?;
            }
            report.loss_log = Some(path);
            Some(f)
        }
        None => None,
    };

    let steps_per_epoch = samples.len().div_ceil(tcfg.batch_size) as u64;
    let warmup_steps = tcfg.warmup_epochs as u64 * steps_per_epoch;
    let groups: BTreeMap<String, ParamGroup> = model.store.iter().map(|(n, p)| (n.clone(), p.group)).collect();

    'epochs: for epoch in start_epoch..tcfg.max_epochs {
        let batches = batch(samples, tcfg.batch_size, epoch_seed(tcfg.seed, epoch), tcfg.augment)?;
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for b in batches {
            if opts.max_steps.is_some_and(|m| adam.t >= m) {
                break 'epochs;
            }
            let step = adam.t + 1;
            let factor = warmup_factor(step, warmup_steps);
            let (lr_p, lr_n) = (tcfg.lr_pretrained * factor, tcfg.lr_new * factor);

            let (terms, grads, bn_stats) = {
                let graph = Graph::new();
                let f = Fwd::new(&graph, &model.store, true, GradScope::Trainable);
                let images = graph.constant(b.images);
                let gt = graph.constant(b.masks);
                let out = model.forward(&f, &images)?;
                let (loss, terms) = model.loss(&out, &gt)?;
                if !terms.total.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        lr_pretrained: lr_p,
                        lr_new: lr_n,
                        grad_norm: f64::NAN,
                    });
                }
                let mut g = graph.backward(&loss);
                (terms, f.param_grads(&mut g), f.take_bn_stats())
            };

            let grad_norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    lr_pretrained: lr_p,
                    lr_new: lr_n,
                    grad_norm,
                });
            }
            let clip = match tcfg.grad_clip {
                Some(c) if grad_norm > c => c / grad_norm,
                _ => 1.0,
            };

            adam.t = step;
            for (name, mut g) in grads {
                let group = groups[&name];
                if group == ParamGroup::Frozen {
                    continue;
                }
                if clip != 1.0 {
                    g = g.map(|v| v * clip);
                }
                let lr = group_lr(group, tcfg) * factor;
                let shape = g.shape().to_vec();
                let m = adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                let v = adam.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                let p = model.store.get_mut(&name).expect("gradient for a stored parameter");
                adamw_update(p, &g, m, v, step, lr, tcfg);
            }
            apply_bn_stats(&mut model.store, &bn_stats, BN_MOMENTUM)?;

            let entry = StepLog {
                step,
                epoch: epoch + 1,
                lr_pretrained: lr_p,
                lr_new: lr_n,
                terms,
                grad_norm,
            };
            if let Some(f) = log_file.as_mut() {
                write_step(f, &entry)?;
            }
            epoch_sum += entry.terms.total;
            epoch_steps += 1;
            report.steps.push(entry);
        }
        if epoch_steps == 0 {
            break;
        }
        let mean = epoch_sum / epoch_steps as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        report.epoch_losses.push(mean);
        report.epochs_done = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            let every = tcfg.checkpoint_every.max(1);
            let last = epoch + 1 == tcfg.max_epochs;
            if (epoch + 1) % every == 0 || last {
                let ck = Checkpoint {
                    model_config: model.cfg.clone(),
                    train_config: Some(tcfg.clone()),
                    epoch: epoch + 1,
                    step: adam.t,
                    rng_seed: tcfg.seed,
                    store: model.store.clone(),
                    adam: Some(adam.clone()),
                };
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                checkpoint::save(&ck, &path)?;
                checkpoint::save(&ck, &dir.join(LATEST))?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(report)
}

/// Reads the step losses back from a log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
        match (rec.get(0).and_then(|s| s.parse::<u64>().ok()), parse(4)) {
            (Some(step), Some(total)) => out.push((step, total)),
            _ => return Err(Error::Input(format!("malformed loss log row in {}", path.display()))),
        }
    }
    Ok(out)
}
