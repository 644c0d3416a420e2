//! Deterministic polyp-like images for tests, demos and smoke runs.
//!
//! Masks are unions of one to three rotated ellipses. Images shade a pink
//! mucosa background and a darker, redder lesion with low-frequency lighting
//! and per-pixel noise, so colour alone nearly separates the classes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_gray, save_rgb, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A `1 x h x w x 1` union of random ellipses, never empty.
pub fn blob_mask(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    let side = h.min(w) as f64;
    let blobs: Vec<[f64; 5]> = (0..rng.random_range(1..=3))
        .map(|_| {
            [
                rng.random_range(0.25..0.75) * h as f64,
                rng.random_range(0.25..0.75) * w as f64,
                rng.random_range(0.12..0.3) * side,
                rng.random_range(0.12..0.3) * side,
                rng.random_range(0.0..std::f64::consts::PI),
            ]
        })
        .collect();
    Tensor::from_fn(Shape::new(1, h, w, 1), |_, y, x, _| {
        let inside = blobs.iter().any(|&[cy, cx, ry, rx, th]| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let (u, v) = (dx * th.cos() + dy * th.sin(), -dx * th.sin() + dy * th.cos());
            (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        });
        inside as u8 as f64
    })
}

/// An RGB image in `[0, 1]` whose lesion is `mask`.
pub fn render(rng: &mut impl Rng, mask: &Tensor) -> Tensor {
    let s = mask.shape();
    let (fy, fx, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3));
    let background = [0.86, 0.56, 0.50];
    let lesion = [0.62, 0.24, 0.22];
    Tensor::from_fn(Shape::new(1, s.h(), s.w(), 3), |_, y, x, c| {
        let (ny, nx) = (y as f64 / s.h() as f64, x as f64 / s.w() as f64);
        let light = 0.9 + 0.1 * (fy * 6.3 * ny + fx * 6.3 * nx + phase).sin();
        let base = if mask.at(0, y, x, 0) > 0.5 { lesion[c] } else { background[c] };
        (base * light + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)
    })
}

pub fn sample(rng: &mut impl Rng, id: impl Into<String>, h: usize, w: usize) -> Result<ImageSample> {
    let mask = blob_mask(rng, h, w);
    let image = render(rng, &mask);
    ImageSample::new(id, image, mask)
}

/// `n` square samples named `synth000`, `synth001`, ...
pub fn split(name: &str, n: usize, size: usize, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|i| sample(&mut rng, format!("synth{i:03}"), size, size)).collect::<Result<_>>()?;
    DatasetSplit::new(name, true, samples)
}

/// Writes [`split`] to `root/images` and `root/masks` as PNG.
pub fn write_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetSplit> {
    let data = split("synthetic", n, size, seed)?;
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &data.samples {
        save_rgb(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        save_gray(&root.join("masks").join(format!("{}.png", s.id)), &s.mask, 255.0)?;
    }
    Ok(data)
}
