//! Architecture and training hyperparameters.
//!
//! [`ModelConfig::sam_b`] mirrors the ViT-B encoder and the SAM mask decoder;
//! [`ModelConfig::toy`] is the desk-scale configuration the tests train.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    /// 1-based layer indices whose outputs are tapped, ascending.
    pub taps: Vec<usize>,
    /// Output width of the convolutional neck that feeds the decoder.
    pub neck_dim: usize,
}

/// Settings of the multi-scale adapter as stored in a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSettings {
    pub enabled: bool,
    pub reduction: usize,
    pub pool_scales: Vec<usize>,
    #[serde(default = "yes")]
    pub zero_init_up: bool,
    /// Include the depth-wise branch on the unpooled bottleneck map.
    #[serde(default = "yes")]
    pub local: bool,
}

fn yes() -> bool {
    true
}

/// Fully resolved adapter hyperparameters for one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub embed_dim: usize,
    pub reduction: usize,
    pub pool_scales: Vec<usize>,
    pub zero_init_up: bool,
    pub local: bool,
}

impl AdapterConfig {
    pub fn new(embed_dim: usize, reduction: usize, pool_scales: Vec<usize>) -> Self {
        Self {
            embed_dim,
            reduction,
            pool_scales,
            zero_init_up: true,
            local: true,
        }
    }

    /// Bottleneck width `D / r`.
    pub fn hidden(&self) -> usize {
        self.embed_dim / self.reduction
    }

    /// Per-scale branch width `D / (4 r)`.
    pub fn branch(&self) -> usize {
        self.embed_dim / (4 * self.reduction)
    }

    /// Input width of the fusing 1x1 convolution.
    pub fn fuse_in(&self) -> usize {
        self.pool_scales.len() * self.branch() + if self.local { self.hidden() } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = (self.embed_dim, self.reduction);
        if d == 0 || r == 0 {
            return Err(config_err("adapter embed_dim and reduction must be positive"));
        }
        if d % r != 0 || d % (4 * r) != 0 {
            return Err(config_err(format!(
                "adapter reduction {r} must satisfy r | D and 4r | D for D = {d}"
            )));
        }
        if self.pool_scales.len() != 4 {
            return Err(config_err(format!(
                "adapter needs exactly 4 pool scales, got {}",
                self.pool_scales.len()
            )));
        }
        if self.pool_scales.contains(&0) {
            return Err(config_err("pool scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlfmMode {
    /// Decoder consumes the last encoder layer.
    Off,
    /// Decoder consumes the 1x1-conv aggregate of the taps.
    Concat,
    /// Decoder consumes the weight-distributed fusion of the taps.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemMode {
    /// Final map is the upsampled decoder logit.
    Off,
    /// Detail head without the multi-scale edge branch.
    NoMeem,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Transformer width; must equal the encoder neck width.
    pub dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Internal width divisor of the token/image cross attentions.
    pub attn_downsample: usize,
}

impl DecoderConfig {
    /// Channel width of the 4x-upscaled mask features.
    pub fn mask_channels(&self) -> usize {
        self.dim / 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemConfig {
    /// Width of the local/edge features (`C`).
    pub local_channels: usize,
    /// Width of the projected last-layer encoder feature.
    pub fd_channels: usize,
    /// Width after the primary-branch 1x1 reduction.
    pub re_channels: usize,
    /// Width of the upsampled primary-branch feature.
    pub up_channels: usize,
    /// Width of the two 3x3 blocks of the prediction head.
    pub head_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterSettings,
    /// Train the base encoder instead of freezing it.
    #[serde(default)]
    pub full_finetune: bool,
    pub mlfm: MlfmMode,
    pub dem: DemMode,
    pub decoder: DecoderConfig,
    pub dem_widths: DemConfig,
    /// Square input side the positional embedding is laid out for.
    pub resolution: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// ViT-B encoder with the SAM mask decoder at 512x512.
    pub fn sam_b() -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 768,
                depth: 12,
                num_heads: 12,
                mlp_dim: 3072,
                patch_size: 16,
                taps: vec![3, 6, 9, 12],
                neck_dim: 256,
            },
            adapter: AdapterSettings {
                enabled: true,
                reduction: 3,
                pool_scales: vec![3, 6, 9, 12],
                zero_init_up: true,
                local: true,
            },
            full_finetune: false,
            mlfm: MlfmMode::Full,
            dem: DemMode::Full,
            decoder: DecoderConfig {
                dim: 256,
                depth: 2,
                num_heads: 8,
                mlp_dim: 2048,
                attn_downsample: 2,
            },
            dem_widths: DemConfig {
                local_channels: 32,
                fd_channels: 32,
                re_channels: 64,
                up_channels: 32,
                head_channels: 32,
            },
            resolution: 512,
            seed: 0,
        }
    }

    /// Desk-scale model: D = 64, four layers, 64x64 inputs.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 64,
                depth: 4,
                num_heads: 4,
                mlp_dim: 256,
                patch_size: 16,
                taps: vec![1, 2, 3, 4],
                neck_dim: 64,
            },
            adapter: AdapterSettings {
                enabled: true,
                reduction: 4,
                pool_scales: vec![1, 2, 3, 4],
                zero_init_up: true,
                local: true,
            },
            full_finetune: false,
            mlfm: MlfmMode::Full,
            dem: DemMode::Full,
            decoder: DecoderConfig {
                dim: 64,
                depth: 2,
                num_heads: 4,
                mlp_dim: 128,
                attn_downsample: 2,
            },
            dem_widths: DemConfig {
                local_channels: 8,
                fd_channels: 8,
                re_channels: 16,
                up_channels: 8,
                head_channels: 8,
            },
            resolution: 64,
            seed: 0,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            embed_dim: self.encoder.embed_dim,
            reduction: self.adapter.reduction,
            pool_scales: self.adapter.pool_scales.clone(),
            zero_init_up: self.adapter.zero_init_up,
            local: self.adapter.local,
        }
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.encoder.patch_size
    }

    /// Ablation-table label of this configuration's module toggles.
    pub fn variant_label(&self) -> Option<&'static str> {
        crate::ablation::Variant::of(self).map(|v| v.label())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.embed_dim == 0 || e.depth == 0 || e.num_heads == 0 || e.patch_size == 0 {
            return Err(config_err("encoder dimensions must be positive"));
        }
        if !e.embed_dim.is_multiple_of(e.num_heads) {
            return Err(config_err(format!(
                "encoder.num_heads {} must divide embed_dim {}",
                e.num_heads, e.embed_dim
            )));
        }
        if e.taps.len() != 4 {
            return Err(config_err(format!("encoder.taps needs 4 entries, got {}", e.taps.len())));
        }
        if e.taps.windows(2).any(|w| w[0] >= w[1]) || e.taps[0] == 0 || e.taps[3] > e.depth {
            return Err(config_err(format!(
                "encoder.taps {:?} must be strictly ascending within [1, {}]",
                e.taps, e.depth
            )));
        }
        if e.neck_dim != self.decoder.dim {
            return Err(config_err(format!(
                "encoder.neck_dim {} must equal decoder.dim {}",
                e.neck_dim, self.decoder.dim
            )));
        }
        let d = &self.decoder;
        if !d.dim.is_multiple_of(8) || d.dim == 0 {
            return Err(config_err("decoder.dim must be a positive multiple of 8"));
        }
        if d.num_heads == 0 || d.attn_downsample == 0 || d.depth == 0 {
            return Err(config_err("decoder depth, heads and attn_downsample must be positive"));
        }
        if !d.dim.is_multiple_of(d.attn_downsample) || !(d.dim / d.attn_downsample).is_multiple_of(d.num_heads) || !d.dim.is_multiple_of(d.num_heads) {
            return Err(config_err("decoder.num_heads must divide the attention widths"));
        }
        let w = &self.dem_widths;
        if [w.local_channels, w.fd_channels, w.re_channels, w.up_channels, w.head_channels].contains(&0) {
            return Err(config_err("dem_widths must be positive"));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(e.patch_size) {
            return Err(config_err(format!(
                "resolution {} must be a positive multiple of the patch size {}",
                self.resolution, e.patch_size
            )));
        }
        if self.adapter.enabled {
            let a = self.adapter_config();
            a.validate()?;
            // Checked against the configured grid only; inputs of other sizes
            // still run, with adaptive pooling repeating cells when a scale
            // exceeds their grid.
            if let Some(&s) = a.pool_scales.iter().find(|&&s| s > self.grid()) {
                return Err(config_err(format!(
                    "adapter pool scale {s} exceeds the {g}x{g} token grid of resolution {}",
                    self.resolution,
                    g = self.grid()
                )));
            }
        }
        if self.variant_label().is_none() {
            return Err(config_err(format!(
                "unsupported module combination: full_finetune={}, adapter={}, mlfm={:?}, dem={:?}",
                self.full_finetune, self.adapter.enabled, self.mlfm, self.dem
            )));
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augment: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = only the last).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrained: 5e-5,
            lr_new: 5e-4,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            max_epochs: 80,
            batch_size: 16,
            optimizer: Optimizer::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            augment: false,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_pretrained", self.lr_pretrained),
            ("lr_new", self.lr_new),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("train.weight_decay must be non-negative"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(config_err("train.beta1/beta2 must be below 1"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(config_err("train.max_epochs and train.batch_size must be positive"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(config_err(format!(
                "train.warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(config_err("train.grad_clip must be positive"));
            }
        }
        Ok(())
    }
}
