//! Single-file checkpoint archive and pretrained-weight import.
//!
//! Layout: the 8-byte magic `MDSAMCK1`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in
//! header order. Tensors are sorted by name and the header uses sorted
//! maps, so saving the same state twice gives identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use mdsam_autograd::{resize_bilinear, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::encoder::{is_adapter_param, ENCODER};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};

pub const MAGIC: &[u8; 8] = b"MDSAMCK1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// AdamW moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    /// Optimizer steps taken so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Seed of the data-order generator; the stream for epoch `e` is
    /// derived from it and `e`, so this plus `epoch` is its full state.
    pub rng_seed: u64,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// A checkpoint of a freshly built or trained model with no optimizer.
    pub fn of_model(model: &Model) -> Self {
        Self {
            model_config: model.cfg.clone(),
            train_config: None,
            epoch: 0,
            step: 0,
            rng_seed: model.cfg.seed,
            store: model.store.clone(),
            adam: None,
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            cfg: self.model_config,
            store: self.store,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<ParamGroup>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    epoch: usize,
    step: u64,
    rng_seed: u64,
    adam_t: Option<u64>,
    tensors: BTreeMap<String, Entry>,
}

fn archive_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, (&Tensor, Option<ParamGroup>)> = BTreeMap::new();
    for (name, p) in ck.store.iter() {
        tensors.insert(format!("{PARAM}{name}"), (&p.value, Some(p.group)));
    }
    for (name, t) in ck.store.iter_buffers() {
        tensors.insert(format!("{BUFFER}{name}"), (t, None));
    }
    if let Some(adam) = &ck.adam {
        for (name, t) in &adam.m {
            tensors.insert(format!("{ADAM_M}{name}"), (t, None));
        }
        for (name, t) in &adam.v {
            tensors.insert(format!("{ADAM_V}{name}"), (t, None));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: ck.model_config.hash(),
        model_config: ck.model_config.clone(),
        train_config: ck.train_config.clone(),
        epoch: ck.epoch,
        step: ck.step,
        rng_seed: ck.rng_seed,
        adam_t: ck.adam.as_ref().map(|a| a.t),
        tensors: tensors
            .iter()
            .map(|(k, (t, g))| {
                (
                    k.clone(),
                    Entry {
                        shape: t.shape().to_vec(),
                        group: *g,
                    },
                )
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let data_len: usize = tensors.values().map(|(t, _)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (t, _) in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses bytes written by [`to_bytes`]. `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(archive_err(path, "not a checkpoint archive (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| archive_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| archive_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(archive_err(path, format!("unsupported format version {}", header.format_version)));
    }
    let mut data = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    let mut adam = header.adam_t.map(|t| AdamState {
        t,
        ..AdamState::default()
    });
    for (key, entry) in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 8 {
            return Err(archive_err(path, format!("truncated data for `{key}`")));
        }
        let values: Vec<f64> = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[n * 8..];
        let t = Tensor::new(entry.shape.clone(), values);
        if let Some(name) = key.strip_prefix(PARAM) {
            let group = entry.group.ok_or_else(|| archive_err(path, format!("parameter `{name}` has no group")))?;
            store.insert(name, t, group);
        } else if let Some(name) = key.strip_prefix(BUFFER) {
            store.insert_buffer(name, t);
        } else if let Some(name) = key.strip_prefix(ADAM_M) {
            adam.as_mut().ok_or_else(|| archive_err(path, "moments without step count"))?.m.insert(name.into(), t);
        } else if let Some(name) = key.strip_prefix(ADAM_V) {
            adam.as_mut().ok_or_else(|| archive_err(path, "moments without step count"))?.v.insert(name.into(), t);
        } else {
            return Err(archive_err(path, format!("unknown entry `{key}`")));
        }
    }
    if !data.is_empty() {
        return Err(archive_err(path, format!("{} trailing bytes", data.len())));
    }
    if header.config_hash != header.model_config.hash() {
        return Err(archive_err(path, "config hash does not match the stored config"));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        epoch: header.epoch,
        step: header.step,
        rng_seed: header.rng_seed,
        store,
        adam,
    })
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| archive_err(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes, path)
}

/// Outcome of [`import_pretrained`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportSummary {
    pub loaded: usize,
    /// Tensors resized to the model's shape (position embeddings).
    pub resized: Vec<String>,
    /// Model parameters absent from the source that kept their fresh
    /// initialization.
    pub kept_init: Vec<String>,
}

/// Copies named weights into `model`, leaving parameter groups untouched.
///
/// Unknown names are an error. A position embedding `[1, g, g, D]` of a
/// different grid is resized bilinearly. Adapter weights may be missing;
/// any other missing parameter is an error.
pub fn import_pretrained(model: &mut Model, weights: &BTreeMap<String, Tensor>) -> Result<ImportSummary> {
    let pos_name = format!("{ENCODER}.pos_embed");
    let mut summary = ImportSummary::default();
    for (name, value) in weights {
        let is_buffer = model.store.buffer(name).is_ok();
        let target_shape = match model.store.param(name) {
            Some(p) => p.value.shape().to_vec(),
            None if is_buffer => model.store.buffer(name)?.shape().to_vec(),
            None => return Err(Error::UnknownKey(name.clone())),
        };
        let mut value = value.clone();
        if value.shape() != target_shape.as_slice() {
            if *name == pos_name && value.ndim() == 4 && target_shape.len() == 4 && value.dim(3) == target_shape[3] {
                value = resize_pos_embed(&value, target_shape[1], target_shape[2]);
                summary.resized.push(name.clone());
            } else {
                return Err(Error::Shape(format!(
                    "`{name}`: source {:?}, model {:?}",
                    value.shape(),
                    target_shape
                )));
            }
        }
        if is_buffer {
            model.store.set_buffer(name, value)?;
        } else {
            model.store.set(name, value)?;
        }
        summary.loaded += 1;
    }
    for (name, _) in model.store.iter() {
        if !weights.contains_key(name) {
            if is_adapter_param(name) || !name.starts_with(ENCODER) {
                summary.kept_init.push(name.clone());
            } else {
                return Err(Error::Input(format!("pretrained weights lack `{name}`")));
            }
        }
    }
    Ok(summary)
}

/// Bilinear resize of an NHWC `[1, g, g, D]` position embedding.
pub fn resize_pos_embed(pos: &Tensor, h: usize, w: usize) -> Tensor {
    let nchw = pos.permute(&[0, 3, 1, 2]);
    resize_bilinear(&nchw, h, w).permute(&[0, 2, 3, 1])
}

/// Parameters and buffers of a checkpoint as one flat map, the input
/// format of [`import_pretrained`].
pub fn weights_of(ck: &Checkpoint) -> BTreeMap<String, Tensor> {
    ck.store
        .iter()
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .chain(ck.store.iter_buffers().map(|(n, t)| (n.clone(), t.clone())))
        .collect()
}
