//! Dataset manifests, image/mask loading, seeded batching and 8-bit
//! saliency map persistence.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use mdsam_autograd::{resize_bilinear, resize_nearest, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raster extensions recognized when listing a directory, in lookup order.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Per-channel input normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// One split of a dataset on disk. Images and masks pair by file stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    #[serde(default)]
    pub normalization: Normalization,
}

impl DatasetManifest {
    /// Reads a TOML manifest; relative directories resolve against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let mut m: Self =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.image_dir.is_relative() {
            m.image_dir = base.join(&m.image_dir);
        }
        if m.mask_dir.is_relative() {
            m.mask_dir = base.join(&m.mask_dir);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// `(id, image path, mask path)` for every image, sorted by id.
    pub fn pairs(&self) -> Result<Vec<(String, PathBuf, PathBuf)>> {
        for (what, dir) in [("image_dir", &self.image_dir), ("mask_dir", &self.mask_dir)] {
            if !dir.is_dir() {
                return Err(Error::Manifest(format!("{what} {} is not a directory", dir.display())));
            }
        }
        let images = list_images(&self.image_dir)?;
        if images.is_empty() {
            return Err(Error::Manifest(format!("no images in {}", self.image_dir.display())));
        }
        images
            .into_iter()
            .map(|(id, img)| {
                let mask = find_by_stem(&self.mask_dir, &id)
                    .ok_or_else(|| Error::Manifest(format!("no mask for `{id}` in {}", self.mask_dir.display())))?;
                Ok((id, img, mask))
            })
            .collect()
    }
}

/// Raster files in `dir` as `(stem, path)`, sorted by stem. When several
/// files share a stem the first extension in [`IMAGE_EXTENSIONS`] wins.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(rank) = extension_rank(&path) else { continue };
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        out.push((stem.to_string(), rank, path));
    }
    out.sort();
    out.dedup_by(|b, a| a.0 == b.0);
    Ok(out.into_iter().map(|(s, _, p)| (s, p)).collect())
}

fn extension_rank(path: &Path) -> Option<usize> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    IMAGE_EXTENSIONS.iter().position(|e| *e == ext)
}

fn find_by_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().find_map(|ext| {
        let p = dir.join(format!("{stem}.{ext}"));
        p.is_file().then_some(p)
    })
}

/// A preprocessed image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, normalized.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    /// The image as a batch of one, `[1, 3, H, W]`.
    pub fn batch_image(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.image.clone().reshape(&[1, 3, h, w])
    }

    /// Left-right mirror of both image and mask.
    pub fn flipped(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: flip_horizontal(&self.image),
            mask: flip_horizontal(&self.mask),
        }
    }
}

fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = t.dim(t.ndim() - 1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn read_image(id: &str, path: &Path) -> Result<image::DynamicImage> {
    let reason = |e: &dyn std::fmt::Display| Error::Sample {
        id: id.to_string(),
        reason: format!("{}: {e}", path.display()),
    };
    ImageReader::open(path)
        .map_err(|e| reason(&e))?
        .with_guessed_format()
        .map_err(|e| reason(&e))?
        .decode()
        .map_err(|e| reason(&e))
}

/// Loads an RGB image, resizes it bilinearly to `size x size` and
/// normalizes it. Returns `[3, size, size]`.
pub fn load_image(id: &str, path: &Path, size: usize, norm: &Normalization) -> Result<Tensor> {
    load_image_with_original(id, path, size, norm).map(|(t, _)| t)
}

/// Like [`load_image`], also returning the original `(height, width)`.
pub fn load_image_with_original(id: &str, path: &Path, size: usize, norm: &Normalization) -> Result<(Tensor, (usize, usize))> {
    let rgb = read_image(id, path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planar = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            planar[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok((normalize_rgb(Tensor::new(vec![1, 3, h, w], planar), size, norm), (h, w)))
}

/// Resizes a `[1, 3, H, W]` tensor in `[0, 1]` to `size x size` and applies
/// the channel normalization, returning `[3, size, size]`.
pub fn normalize_rgb(rgb: Tensor, size: usize, norm: &Normalization) -> Tensor {
    let mut t = resize_bilinear(&rgb, size, size).reshape(&[3, size, size]);
    let plane = size * size;
    for (c, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
    t
}

/// Loads a grayscale mask, resizes it by nearest neighbour and binarizes
/// at 0.5. Returns `[1, size, size]`.
pub fn load_mask(id: &str, path: &Path, size: usize) -> Result<Tensor> {
    let gray = read_image(id, path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw: Vec<f64> = gray.pixels().map(|p| p[0] as f64 / 255.0).collect();
    let t = resize_nearest(&Tensor::new(vec![1, 1, h, w], raw), size, size);
    Ok(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).reshape(&[1, size, size]))
}

/// Checks a working resolution: positive and a multiple of the patch size.
pub fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Input(format!("resolution {size} is not a positive multiple of 16")));
    }
    Ok(())
}

/// Loads every pair of the manifest at `size x size`.
pub fn load_dataset(manifest: &DatasetManifest, size: usize) -> Result<Vec<Sample>> {
    check_size(size)?;
    manifest
        .pairs()?
        .into_iter()
        .map(|(id, img, mask)| {
            let image = load_image(&id, &img, size, &manifest.normalization)?;
            let mask = load_mask(&id, &mask, size)?;
            Ok(Sample { id, image, mask })
        })
        .collect()
}

/// Seeded shuffle of `0..n` cut into batches of `batch_size`; the last
/// partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled_batches(n, batch_size, &mut rng)
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A stacked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    /// `[B, 1, H, W]`.
    pub masks: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Stacks samples of equal size into a batch.
pub fn stack(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height() != h || s.width() != w || s.mask.shape() != [1, h, w] {
            return Err(Error::Input(format!("sample `{}` does not match batch size {h}x{w}", s.id)));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(vec![b, 3, h, w], images),
        masks: Tensor::new(vec![b, 1, h, w], masks),
    })
}

/// Seeded batch stream. With `augment`, each sample is mirrored with
/// probability 0.5, drawn from the same seeded generator.
pub fn batch(samples: &[Sample], batch_size: usize, seed: u64, augment: bool) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = shuffled_batches(samples.len(), batch_size, &mut rng);
    groups
        .into_iter()
        .map(|idx| {
            let owned: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if augment && rng.random_bool(0.5) {
                        samples[i].flipped()
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            stack(&owned.iter().collect::<Vec<_>>())
        })
        .collect()
}

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    let nd = map.ndim();
    if nd < 2 || map.shape()[..nd - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("saliency map must be a single HxW plane, got {:?}", map.shape())));
    }
    Ok((map.dim(nd - 2), map.dim(nd - 1)))
}

/// Writes a single-plane map as an 8-bit grayscale image, clamping to
/// `[0, 1]` first. The format follows the file extension.
pub fn save_saliency(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = map_dims(map)?;
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, &v) in map.data().iter().enumerate() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel((i % w) as u32, (i / w) as u32, Luma([level]));
    }
    img.save(path)?;
    Ok(())
}

/// Reads an 8-bit grayscale map as `[1, H, W]` in `[0, 1]`.
pub fn load_saliency(path: &Path) -> Result<Tensor> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
    let gray = read_image(&id, path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Tensor::new(vec![1, h, w], gray.pixels().map(|p| p[0] as f64 / 255.0).collect()))
}
