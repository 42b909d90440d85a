//! Multi-scale, detail-enhanced adaptation of a promptable segmentation
//! model to salient object detection: architecture, losses, metrics,
//! data handling, training and ablation tooling.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dem;
pub mod encoder;
mod error;
pub mod fusion;
pub mod grid;
pub mod infer;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod train;

pub use config::{AdapterConfig, DecoderConfig, DemConfig, DemMode, EncoderConfig, MlfmMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use model::{build_model, params_count, Model, ModelOutput};
pub use params::{Fwd, GradScope, ParamGroup, ParamStore};
