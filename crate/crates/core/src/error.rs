use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("failed to read {id}: {reason}")]
    Sample { id: String, reason: String },

    #[error("archive error in {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("unknown pretrained key `{0}`")]
    UnknownKey(String),

    #[error("non-finite loss at step {step} (lr pretrained {lr_pretrained:e}, lr new {lr_new:e}, grad norm {grad_norm:e})")]
    NonFinite {
        step: u64,
        lr_pretrained: f64,
        lr_new: f64,
        grad_norm: f64,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
