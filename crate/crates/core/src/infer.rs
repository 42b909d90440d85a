//! Batch inference over a directory of images.

use std::path::{Path, PathBuf};

use mdsam_autograd::resize_bilinear;

use crate::data::{check_size, list_images, load_image_with_original, save_saliency, Normalization};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferReport {
    pub written: Vec<PathBuf>,
    /// `(id, reason)` of inputs that could not be processed.
    pub skipped: Vec<(String, String)>,
}

/// Predicts every image in `image_dir` at `resolution x resolution` and
/// writes `<stem>.png` into `out_dir`, resized back to the input's size.
/// Unreadable inputs are skipped; at least one must succeed.
pub fn infer_dir(model: &Model, image_dir: &Path, out_dir: &Path, resolution: usize, norm: &Normalization) -> Result<InferReport> {
    check_size(resolution)?;
    let inputs = list_images(image_dir)?;
    if inputs.is_empty() {
        return Err(Error::Input(format!("no images in {}", image_dir.display())));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut report = InferReport::default();
    for (id, path) in inputs {
        let (image, (h, w)) = match load_image_with_original(&id, &path, resolution, norm) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                report.skipped.push((id, e.to_string()));
                continue;
            }
        };
        let prob = model.predict(&image.reshape(&[1, 3, resolution, resolution]))?;
        let full = resize_bilinear(&prob, h, w);
        let out = out_dir.join(format!("{id}.png"));
        save_saliency(&full, &out)?;
        report.written.push(out);
    }
    if report.written.is_empty() {
        return Err(Error::Input(format!("no readable images in {}", image_dir.display())));
    }
    Ok(report)
}
