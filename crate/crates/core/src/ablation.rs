//! The module ablation matrix and its runner.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{DemMode, MlfmMode, ModelConfig, TrainConfig};
use crate::data::Sample;
use crate::error::{config_err, Result};
use crate::metrics::{evaluate_pairs, EvalPair};
use crate::model::build_model;
use crate::train::{train, TrainOptions};

/// The six module combinations of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "(a) Full fine-tuning",
            Variant::B => "(b) SAM+LMSA",
            Variant::C => "(c) SAM+LMSA+MLFM*",
            Variant::D => "(d) SAM+LMSA+MLFM",
            Variant::E => "(e) SAM+LMSA+MLFM+DEM*",
            Variant::F => "(f) SAM+LMSA+MLFM+DEM",
        }
    }

    /// `(full_finetune, adapter, mlfm, dem)` toggles of the variant.
    pub fn toggles(self) -> (bool, bool, MlfmMode, DemMode) {
        match self {
            Variant::A => (true, false, MlfmMode::Off, DemMode::Off),
            Variant::B => (false, true, MlfmMode::Off, DemMode::Off),
            Variant::C => (false, true, MlfmMode::Concat, DemMode::Off),
            Variant::D => (false, true, MlfmMode::Full, DemMode::Off),
            Variant::E => (false, true, MlfmMode::Full, DemMode::NoMeem),
            Variant::F => (false, true, MlfmMode::Full, DemMode::Full),
        }
    }

    /// The variant whose toggles match `cfg`, if any.
    pub fn of(cfg: &ModelConfig) -> Option<Variant> {
        let t = (cfg.full_finetune, cfg.adapter.enabled, cfg.mlfm, cfg.dem);
        Variant::ALL.into_iter().find(|v| v.toggles() == t)
    }

    /// `base` with this variant's toggles applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (ft, ad, mlfm, dem) = self.toggles();
        let mut cfg = base.clone();
        cfg.full_finetune = ft;
        cfg.adapter.enabled = ad;
        cfg.mlfm = mlfm;
        cfg.dem = dem;
        cfg
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let key = s.trim().trim_start_matches('(').trim_end_matches(')').to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.label()[1..2] == key)
            .ok_or_else(|| config_err(format!("unknown ablation variant `{s}` (expected a-f)")))
    }
}

/// One row of an ablation matrix: a label and a full model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub label: String,
    pub model: ModelConfig,
}

impl MatrixEntry {
    pub fn variant(base: &ModelConfig, v: Variant) -> Self {
        Self {
            label: v.label().to_string(),
            model: v.apply(base),
        }
    }

    /// The full model with different pool scales and local branch setting.
    pub fn scales(base: &ModelConfig, scales: &[usize], local: bool) -> Self {
        let mut model = Variant::F.apply(base);
        model.adapter.pool_scales = scales.to_vec();
        model.adapter.local = local;
        let list: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
        Self {
            label: format!("scales {} local {}", list.join(","), if local { "yes" } else { "no" }),
            model,
        }
    }
}

/// The six rows (a)-(f) over a shared base configuration.
pub fn table_matrix(base: &ModelConfig) -> Vec<MatrixEntry> {
    Variant::ALL.iter().map(|&v| MatrixEntry::variant(base, v)).collect()
}

/// Pool-scale and local-branch rows over the full model.
pub fn scale_matrix(base: &ModelConfig, scale_sets: &[(Vec<usize>, bool)]) -> Vec<MatrixEntry> {
    scale_sets.iter().map(|(s, l)| MatrixEntry::scales(base, s, *l)).collect()
}

/// Result of one matrix row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    pub trainable: usize,
    pub final_loss: f64,
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    /// Set when the variant failed; metric fields are NaN then.
    pub error: Option<String>,
}

fn run_entry(entry: &MatrixEntry, train_set: &[Sample], eval_set: &[Sample], tcfg: &TrainConfig) -> Result<AblationRow> {
    let mut model = build_model(&entry.model)?;
    let opts = TrainOptions::default();
    let report = train(&mut model, train_set, tcfg, &opts)?;
    let mut pairs = Vec::with_capacity(eval_set.len());
    for s in eval_set {
        let pred = model.predict(&s.batch_image())?;
        pairs.push(EvalPair::new(&s.id, pred.into_data(), s.mask.data().to_vec(), s.width(), s.height())?);
    }
    let rep = evaluate_pairs(&pairs)?;
    let b = model.breakdown();
    Ok(AblationRow {
        label: entry.label.clone(),
        params: b.total,
        trainable: b.total - b.by_group[&crate::params::ParamGroup::Frozen],
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        mae: rep.aggregate.mae,
        f_max: rep.aggregate.f_max,
        s_measure: rep.aggregate.s_measure,
        e_measure: rep.aggregate.e_measure,
        error: None,
    })
}

/// Trains and evaluates every entry with the same data, training settings
/// and seeds. A failing entry is recorded and the rest still run.
pub fn run_ablation(matrix: &[MatrixEntry], train_set: &[Sample], eval_set: &[Sample], tcfg: &TrainConfig) -> Vec<AblationRow> {
    matrix
        .iter()
        .map(|entry| {
            run_entry(entry, train_set, eval_set, tcfg).unwrap_or_else(|e| {
                log::warn!("ablation entry {} failed: {e}", entry.label);
                AblationRow {
                    label: entry.label.clone(),
                    params: 0,
                    trainable: 0,
                    final_loss: f64::NAN,
                    mae: f64::NAN,
                    f_max: f64::NAN,
                    s_measure: f64::NAN,
                    e_measure: f64::NAN,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 9] = ["method", "params", "trainable", "final_loss", "mae", "f_max", "s_m", "e_m", "error"];

/// Writes the rows as CSV preceded by a `# config_hash=` comment line.
pub fn write_ablation_csv<W: Write>(mut out: W, rows: &[AblationRow], config_hash: &str) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.params.to_string(),
            r.trainable.to_string(),
            format!("{:.6}", r.final_loss),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.f_max),
            format!("{:.6}", r.s_measure),
            format!("{:.6}", r.e_measure),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
