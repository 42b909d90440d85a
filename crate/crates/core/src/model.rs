//! Full model assembly: encoder, fusion, decoder and detail head.

use std::collections::BTreeMap;

use mdsam_autograd::{Graph, Tensor, Var};

use crate::config::{DemMode, MlfmMode, ModelConfig};
use crate::decoder::{decode, init_decoder, DECODER};
use crate::dem::{dem_forward, init_dem, project_fd, DEM};
use crate::encoder::{encoder_forward, init_encoder, is_adapter_param, neck_forward, ENCODER};
use crate::error::Result;
use crate::fusion::{init_mlfm, mlfm_forward, MLFM};
use crate::losses::{total_loss, LossTerms};
use crate::params::{Fwd, GradScope, Init, ParamGroup, ParamStore};

/// Module a parameter belongs to, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Module {
    Encoder,
    Lmsa,
    Mlfm,
    Decoder,
    Dem,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Encoder, Module::Lmsa, Module::Mlfm, Module::Decoder, Module::Dem];

    pub fn of(name: &str) -> Module {
        if is_adapter_param(name) {
            Module::Lmsa
        } else if name.starts_with(ENCODER) {
            Module::Encoder
        } else if name.starts_with(MLFM) {
            Module::Mlfm
        } else if name.starts_with(DEM) {
            Module::Dem
        } else {
            debug_assert!(name.starts_with(DECODER), "unexpected parameter {name}");
            Module::Decoder
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::Encoder => "encoder",
            Module::Lmsa => "lmsa",
            Module::Mlfm => "mlfm",
            Module::Decoder => "decoder",
            Module::Dem => "dem",
        }
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Raw logits of one forward.
pub struct ModelOutput<'g> {
    /// `[N, 1, H, W]` final logit at input resolution.
    pub s_f: Var<'g>,
    /// `[N, 1, H/4, W/4]` coarse decoder logit.
    pub s_m: Var<'g>,
}

/// Validates `cfg` and initializes every parameter from `cfg.seed`.
///
/// The base encoder is frozen unless `full_finetune` is set, in which case
/// it joins the decoder in the pretrained group. Adapters, fusion, the
/// detail head and the decoder's mask head are new.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let encoder_group = if cfg.full_finetune {
        ParamGroup::Pretrained
    } else {
        ParamGroup::Frozen
    };
    {
        let mut init = Init::new(&mut store, cfg.seed, encoder_group);
        init_encoder(&mut init, cfg, ParamGroup::New);
        init.with_group(ParamGroup::New);
        let d = cfg.encoder.embed_dim;
        match cfg.mlfm {
            MlfmMode::Off => {}
            MlfmMode::Concat => init.conv(&format!("{MLFM}.aggregate"), 4 * d, d, 1, 1, true),
            MlfmMode::Full => init_mlfm(&mut init, d, cfg.encoder.taps.len()),
        }
        init.with_group(ParamGroup::Pretrained);
        init_decoder(&mut init, &cfg.decoder, ParamGroup::New);
        init.with_group(ParamGroup::New);
        init_dem(&mut init, &cfg.dem_widths, d, cfg.decoder.mask_channels(), cfg.dem);
    }
    Ok(Model { cfg: cfg.clone(), store })
}

/// Exact number of scalar parameters, optionally for one group.
pub fn params_count(model: &Model, group: Option<ParamGroup>) -> usize {
    model.store.count(group)
}

/// Parameter counts per module and per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
    pub by_module: BTreeMap<Module, usize>,
}

impl Model {
    pub fn breakdown(&self) -> ParamBreakdown {
        let mut by_group: BTreeMap<ParamGroup, usize> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        let mut by_module: BTreeMap<Module, usize> = Module::ALL.iter().map(|&m| (m, 0)).collect();
        for (name, p) in self.store.iter() {
            *by_group.get_mut(&p.group).unwrap() += p.value.numel();
            *by_module.get_mut(&Module::of(name)).unwrap() += p.value.numel();
        }
        ParamBreakdown {
            total: self.store.count(None),
            by_group,
            by_module,
        }
    }

    /// Forward over a normalized `[N, 3, H, W]` batch.
    pub fn forward<'g>(&self, f: &Fwd<'g, '_>, images: &Var<'g>) -> Result<ModelOutput<'g>> {
        let cfg = &self.cfg;
        let enc = encoder_forward(f, cfg, images)?;
        let last = enc.last_nchw();
        let embedding = mlfm_forward(f, cfg.mlfm, &enc.taps_nchw(), &last)?;
        let embedding = neck_forward(f, &embedding)?;
        let dec = decode(f, &cfg.decoder, &embedding)?;
        let f_d = match cfg.dem {
            DemMode::Off => None,
            _ => Some(project_fd(f, &last, (dec.f_m.shape()[2], dec.f_m.shape()[3]))?),
        };
        let out = dem_forward(f, cfg.dem, images, &dec.f_m, f_d.as_ref(), &dec.s_m)?;
        Ok(ModelOutput { s_f: out.s_f, s_m: dec.s_m })
    }

    /// Training objective on logits: both outputs when the detail head is
    /// on, otherwise only the (upsampled coarse) final output.
    pub fn loss<'g>(&self, out: &ModelOutput<'g>, gt: &Var<'g>) -> Result<(Var<'g>, LossTerms)> {
        let s_f = out.s_f.sigmoid();
        if self.cfg.dem == DemMode::Off {
            total_loss(&s_f, None, gt)
        } else {
            let (h, w) = (gt.shape()[2], gt.shape()[3]);
            let s_m = out.s_m.resize_bilinear(h, w).sigmoid();
            total_loss(&s_f, Some(&s_m), gt)
        }
    }

    /// Eval-mode saliency probabilities `[N, 1, H, W]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let graph = Graph::no_grad();
        let f = Fwd::new(&graph, &self.store, false, GradScope::None);
        let out = self.forward(&f, &graph.constant(images.clone()))?;
        Ok(out.s_f.sigmoid().value().clone())
    }
}
