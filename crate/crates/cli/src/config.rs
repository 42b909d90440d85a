//! Run configuration files shared by `train`, `ablate` and `params`.
//!
//! ```toml
//! preset = "toy"          # or "sam_b"; alternatively a full [model] table
//! variant = "f"           # optional ablation row a-f
//! resolution = 64         # optional override
//!
//! [train]                 # any TrainConfig field; the rest keep defaults
//! max_epochs = 20
//!
//! [data]
//! manifest = "data/train/manifest.toml"   # relative to this file
//! # or: synth = { count = 8, seed = 7 }
//!
//! [ablation]              # ablate only
//! variants = ["a", "b", "c", "d", "e", "f"]
//! scales = [{ scales = [1, 2, 3, 4], local = false }]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mdsam_core::ablation::{MatrixEntry, Variant};
use mdsam_core::data::{load_dataset, DatasetManifest, Sample};
use mdsam_core::synth::synth_samples;
use mdsam_core::{Error, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub variant: Option<String>,
    pub resolution: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub ablation: Option<AblationConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Evaluation split for `ablate`; the training split is reused when unset.
    pub eval_manifest: Option<PathBuf>,
    pub synth: Option<SynthData>,
}

/// In-memory synthetic images at the model resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthData {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default)]
    pub variants: Vec<String>,
    #[serde(default)]
    pub scales: Vec<ScaleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleRow {
    pub scales: Vec<usize>,
    #[serde(default = "yes")]
    pub local: bool,
}

fn yes() -> bool {
    true
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "sam_b" | "sam-b" => Ok(ModelConfig::sam_b()),
        other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or sam_b)")).into()),
    }
}

impl RunConfig {
    /// Parses a TOML file and resolves relative data paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The model configuration after preset, variant and overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match (&self.preset, &self.model) {
            (Some(_), Some(_)) => bail!(Error::Config("give either `preset` or a [model] table, not both".into())),
            (Some(p), None) => preset(p)?,
            (None, Some(m)) => m.clone(),
            (None, None) => bail!(Error::Config("missing `preset` or [model] table".into())),
        };
        if let Some(v) = &self.variant {
            m = Variant::parse(v)?.apply(&m);
        }
        if let Some(r) = self.resolution {
            m.resolution = r;
        }
        if let Some(s) = self.seed {
            m.seed = s;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train.validate()?;
        Ok(self.train.clone())
    }

    /// Training samples at `size`.
    pub fn train_samples(&self, size: usize) -> Result<Vec<Sample>> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(m), _) => Ok(load_dataset(&DatasetManifest::load(m)?, size)?),
            (None, Some(s)) => Ok(synth_samples(s.count, size, s.seed)),
            (None, None) => bail!(Error::Config("no training data: set data.manifest, data.synth or --manifest".into())),
        }
    }

    /// Evaluation samples: the eval manifest when given, else the training
    /// samples.
    pub fn eval_samples(&self, size: usize, train: &[Sample]) -> Result<Vec<Sample>> {
        match &self.data.eval_manifest {
            Some(m) => Ok(load_dataset(&DatasetManifest::load(m)?, size)?),
            None => Ok(train.to_vec()),
        }
    }

    /// Ablation rows: the listed variants (all six when neither list is
    /// given) followed by the scale rows.
    pub fn matrix(&self) -> Result<Vec<MatrixEntry>> {
        let base = self.model_config()?;
        let ab = self.ablation.clone().unwrap_or_default();
        let mut rows = Vec::new();
        if ab.variants.is_empty() && ab.scales.is_empty() {
            rows.extend(Variant::ALL.iter().map(|&v| MatrixEntry::variant(&base, v)));
        }
        for v in &ab.variants {
            rows.push(MatrixEntry::variant(&base, Variant::parse(v)?));
        }
        for s in &ab.scales {
            rows.push(MatrixEntry::scales(&base, &s.scales, s.local));
        }
        for r in &rows {
            r.model.validate().with_context(|| format!("ablation row {}", r.label))?;
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_with_overrides() {
        let cfg: RunConfig = toml::from_str("preset = \"toy\"\nvariant = \"b\"\nresolution = 128\n[train]\nmax_epochs = 3\nwarmup_epochs = 1\n").unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.resolution, 128);
        assert_eq!(Variant::of(&m), Some(Variant::B));
        assert_eq!(cfg.train_config().unwrap().max_epochs, 3);
    }

    #[test]
    fn unknown_fields_and_missing_model_are_rejected() {
        assert!(toml::from_str::<RunConfig>("preset = \"toy\"\nbogus = 1\n").is_err());
        assert!(RunConfig::default().model_config().is_err());
    }

    #[test]
    fn default_matrix_has_six_rows() {
        let cfg: RunConfig = toml::from_str("preset = \"toy\"").unwrap();
        assert_eq!(cfg.matrix().unwrap().len(), 6);
        let cfg: RunConfig = toml::from_str("preset = \"toy\"\n[ablation]\nvariants = [\"b\", \"f\"]\nscales = [{ scales = [1, 2, 3, 4], local = false }]\n").unwrap();
        let labels: Vec<String> = cfg.matrix().unwrap().into_iter().map(|r| r.label).collect();
        assert_eq!(labels.len(), 3);
        assert_eq!(labels[0], "(b) SAM+LMSA");
    }
}
