//! Seeded synthetic saliency data: one or two bright shapes on a noisy,
//! shaded background. Used for smoke runs and the capability tests.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use mdsam_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize_rgb, DatasetManifest, Normalization, Sample};
use crate::error::Result;

/// One generated image with its mask.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }

    fn random(rng: &mut ChaCha8Rng, s: f64) -> Shape {
        let cx = rng.random_range(0.25..0.75) * s;
        let cy = rng.random_range(0.25..0.75) * s;
        let a = rng.random_range(0.12..0.28) * s;
        let b = rng.random_range(0.12..0.28) * s;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cx, cy, rx: a, ry: b }
        } else {
            Shape::Rect {
                x0: cx - a,
                y0: cy - b,
                x1: cx + a,
                y1: cy + b,
            }
        }
    }
}

fn generate_one(rng: &mut ChaCha8Rng, id: String, size: usize) -> SynthImage {
    let s = size as f64;
    let n_shapes = rng.random_range(1..=2);
    let shapes: Vec<Shape> = (0..n_shapes).map(|_| Shape::random(rng, s)).collect();
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.65..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.4));
    let shade = rng.random_range(-0.15..0.15);
    let mut image = RgbImage::new(size as u32, size as u32);
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shapes.iter().any(|sh| sh.contains(xf, yf));
            let base = if inside { fg } else { bg };
            let grad = shade * (xf / s - 0.5);
            let px: [u8; 3] = std::array::from_fn(|c| {
                let noise = rng.random_range(-0.05..0.05);
                ((base[c] + grad + noise).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.put_pixel(x as u32, y as u32, Rgb(px));
            mask.put_pixel(x as u32, y as u32, Luma([if inside { 255 } else { 0 }]));
        }
    }
    SynthImage { id, image, mask }
}

/// `count` images of `size x size`, ids `synth_000`, `synth_001`, ...
pub fn generate(count: usize, size: usize, seed: u64) -> Vec<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| generate_one(&mut rng, format!("synth_{i:03}"), size)).collect()
}

/// Converts a generated pair into a sample exactly as loading the written
/// files at the same size would.
pub fn to_sample(img: &SynthImage, norm: &Normalization) -> Sample {
    let (w, h) = (img.image.width() as usize, img.image.height() as usize);
    let mut planar = vec![0.0; 3 * h * w];
    for (x, y, px) in img.image.enumerate_pixels() {
        for c in 0..3 {
            planar[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    let image = normalize_rgb(Tensor::new(vec![1, 3, h, w], planar), h, norm);
    let mask = Tensor::new(
        vec![1, h, w],
        img.mask.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect(),
    );
    Sample {
        id: img.id.clone(),
        image,
        mask,
    }
}

/// In-memory synthetic samples with the default normalization.
pub fn synth_samples(count: usize, size: usize, seed: u64) -> Vec<Sample> {
    let norm = Normalization::default();
    generate(count, size, seed).iter().map(|g| to_sample(g, &norm)).collect()
}

/// Writes `images/`, `masks/` and `manifest.toml` under `dir` and returns
/// the manifest path.
pub fn write_dataset(dir: &Path, split: &str, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for g in generate(count, size, seed) {
        g.image.save(images.join(format!("{}.png", g.id)))?;
        g.mask.save(masks.join(format!("{}.png", g.id)))?;
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        image_dir: PathBuf::from("images"),
        mask_dir: PathBuf::from("masks"),
        normalization: Normalization::default(),
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_nontrivial() {
        let a = synth_samples(3, 32, 5);
        let b = synth_samples(3, 32, 5);
        assert_eq!(a, b);
        for s in &a {
            let fg = s.mask.sum();
            assert!(fg > 0.0 && fg < 32.0 * 32.0);
            assert!(s.image.all_finite());
        }
        assert_ne!(a, synth_samples(3, 32, 6));
    }
}
