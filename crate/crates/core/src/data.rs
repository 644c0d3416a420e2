//! Image/mask loading, edge ground truth and batch assembly.
//!
//! A dataset root holds `images/` and `masks/` with matching file stems.
//! Images may be PNG or JPEG; masks are single-channel. Edge ground truth is
//! always derived from the mask, never read from disk.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Canny hysteresis thresholds on the `{0, 255}` mask.
pub const CANNY_LOW: f64 = 100.0;
pub const CANNY_HIGH: f64 = 200.0;

/// Smallest batch side; the stride-32 level must be at least 2 pixels.
pub const MIN_BATCH_SIDE: usize = 64;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One image with its mask and derived edge map, all `1 x H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// RGB in `[0, 1]`, 3 channels.
    pub image: Tensor,
    /// `{0, 1}`, 1 channel.
    pub mask: Tensor,
    /// `{0, 1}`, 1 channel.
    pub edge_gt: Tensor,
}

impl ImageSample {
    /// Derives `edge_gt` from `mask`.
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let (si, sm) = (image.shape(), mask.shape());
        if si.n() != 1 || si.c() != 3 || sm != Shape::new(1, si.h(), si.w(), 1) {
            return Err(Error::shape(format!("sample needs 1xHxWx3 image and 1xHxWx1 mask, got {si:?} and {sm:?}")));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::shape(format!("mask value {v} is not binary")));
        }
        let edge_gt = make_edge_ground_truth(&mask);
        Ok(ImageSample { id: id.into(), image, mask, edge_gt })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }
}

/// Samples in lexicographic id order.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub name: String,
    /// Drawn from a training distribution.
    pub seen: bool,
    pub samples: Vec<ImageSample>,
}

impl DatasetSplit {
    /// Sorts by id and rejects duplicates.
    pub fn new(name: impl Into<String>, seen: bool, mut samples: Vec<ImageSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Dataset(format!("duplicate sample id `{}`", w[0].id)));
        }
        Ok(DatasetSplit { name: name.into(), seen, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// The samples named in `ids`, which must all exist.
    pub fn subset(&self, name: impl Into<String>, ids: &[String]) -> Result<Self> {
        let by_id: HashMap<&str, &ImageSample> = self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let samples = ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| {
                    Error::Dataset(format!("manifest id `{id}` is not in split `{}`", self.name))
                })
            })
            .collect::<Result<_>>()?;
        DatasetSplit::new(name, self.seen, samples)
    }
}

/// How raw mask values become `{0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Raw values must all lie in `{0, 1}` or all in `{0, 255}`.
    Strict,
    /// Values at or above half the 8-bit range become 1.
    Threshold,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// `(height, width)`.
    pub resize_to: (usize, usize),
    pub mask_policy: MaskPolicy,
    pub seen: bool,
}

impl LoadOptions {
    pub fn new(resize_to: (usize, usize)) -> Self {
        LoadOptions { resize_to, mask_policy: MaskPolicy::Strict, seen: true }
    }
}

/// Loads every image under `root/images` with strict mask checking.
pub fn load_dataset(root: &Path, resize_to: (usize, usize)) -> Result<DatasetSplit> {
    load_dataset_with(root, &LoadOptions::new(resize_to))
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<DatasetSplit> {
    let (h, w) = opts.resize_to;
    if h == 0 || w == 0 {
        return Err(Error::config(format!("resize target {h}x{w} is empty")));
    }
    let images = list_images(&root.join("images"))?;
    let mask_dir = root.join("masks");
    let masks: HashMap<String, PathBuf> = list_images(&mask_dir)?.into_iter().collect();
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in images {
        let mask_path = masks
            .get(&stem)
            .ok_or_else(|| Error::MissingMask { stem: stem.clone(), dir: mask_dir.clone() })?;
        let image = read_rgb(&path)?.resize_bilinear(h, w);
        let mask = read_mask(&stem, mask_path, opts.mask_policy)?.resize_nearest(h, w).map(binarize);
        samples.push(ImageSample::new(stem, image, mask)?);
    }
    let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    DatasetSplit::new(name, opts.seen, samples)
}

/// `(stem, path)` for every image file in `dir`, sorted by stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Dataset(format!("two files share the stem `{}` in {}", w[0].0, dir.display())));
    }
    Ok(out)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// `1 x H x W x 3` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::from_vec(Shape::new(1, h as usize, w as usize, 3), data)
}

/// `1 x H x W x 1` in `{0, 1}`.
pub fn read_mask(stem: &str, path: &Path, policy: MaskPolicy) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let max = raw.iter().copied().max().unwrap_or(0);
    let values: Vec<f64> = match policy {
        MaskPolicy::Strict => {
            let high = if max <= 1 { 1 } else { 255 };
            if let Some(v) = raw.iter().find(|&&v| v != 0 && v != high) {
                return Err(Error::NonBinaryMask {
                    stem: stem.to_string(),
                    detail: format!("value {v} in a mask whose foreground value is {high}"),
                });
            }
            raw.iter().map(|&v| (v == high && v != 0) as u8 as f64).collect()
        }
        MaskPolicy::Threshold => {
            let cut = if max <= 1 { 1 } else { 128 };
            raw.iter().map(|&v| (v >= cut) as u8 as f64).collect()
        }
    };
    Tensor::from_vec(Shape::new(1, h as usize, w as usize, 1), values)
}

fn binarize(v: f64) -> f64 {
    if v >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// One-pixel inner boundary of the foreground, by Canny on the `{0, 255}`
/// mask.
///
/// Sobel gradients use replicated borders, so the image edge is not a
/// boundary. Non-maximum suppression compares each pixel with its two
/// neighbours along the signed gradient direction and keeps it when it beats
/// the uphill neighbour and ties or beats the downhill one; on a binary mask
/// this selects the foreground side of every transition. Hysteresis uses
/// [`CANNY_LOW`] and [`CANNY_HIGH`] with 8-connectivity.
pub fn make_edge_ground_truth(mask: &Tensor) -> Tensor {
    let s = mask.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        let plane: Vec<f64> = (0..s.h() * s.w()).map(|i| 255.0 * mask.at(n, i / s.w(), i % s.w(), 0)).collect();
        let edges = canny(&plane, s.h(), s.w(), CANNY_LOW, CANNY_HIGH);
        for (i, e) in edges.into_iter().enumerate() {
            if e {
                out.set(n, i / s.w(), i % s.w(), 0, 1.0);
            }
        }
    }
    out
}

/// Canny without pre-smoothing on a row-major `h x w` plane.
pub fn canny(plane: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![(0isize, 0isize); h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // eight-way quantisation of the signed direction
            let octant = (gy.atan2(gx) / std::f64::consts::FRAC_PI_4).round() as i32;
            dir[i] = match octant.rem_euclid(8) {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                3 => (1, -1),
                4 => (0, -1),
                5 => (-1, -1),
                6 => (-1, 0),
                _ => (-1, 1),
            };
        }
    }
    let mag_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dy, dx) = dir[i];
            if m > mag_at(y + dy, x + dx) && m >= mag_at(y - dy, x - dx) {
                thin[i] = m;
            }
        }
    }
    // hysteresis: grow from strong pixels through weak ones
    let mut keep = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= high).collect();
    for &i in &stack {
        keep[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !keep[j] && thin[j] >= low {
                    keep[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    keep
}

/// Images, masks and edge maps of one batch, `N x H x W x C`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub masks: Tensor,
    pub edges: Tensor,
}

/// `base * scale` rounded to the nearest multiple of 32.
pub fn scaled_side(base: usize, scale: f64) -> Result<usize> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::config(format!("scale {scale} must be positive")));
    }
    let side = ((base as f64 * scale / 32.0).round() as usize) * 32;
    if side < MIN_BATCH_SIDE {
        return Err(Error::config(format!(
            "scale {scale} of base {base} gives side {side}, below the minimum {MIN_BATCH_SIDE}"
        )));
    }
    Ok(side)
}

/// Rescales the chosen samples to `scaled_side(base, scale)` and stacks
/// them. Masks are resized by nearest neighbour and edges are recomputed
/// from the resized masks.
pub fn make_batch(split: &DatasetSplit, indices: &[usize], scale: f64, base: usize) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let side = scaled_side(base, scale)?;
    let mut ids = Vec::with_capacity(indices.len());
    let (mut images, mut masks, mut edges) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let s = split.samples.get(i).ok_or_else(|| {
            Error::Dataset(format!("batch index {i} out of range for split of {}", split.len()))
        })?;
        ids.push(s.id.clone());
        images.push(s.image.resize_bilinear(side, side));
        if (s.height(), s.width()) == (side, side) {
            masks.push(s.mask.clone());
            edges.push(s.edge_gt.clone());
        } else {
            let m = s.mask.resize_nearest(side, side).map(binarize);
            edges.push(make_edge_ground_truth(&m));
            masks.push(m);
        }
    }
    Ok(Batch { ids, images: Tensor::stack(&images)?, masks: Tensor::stack(&masks)?, edges: Tensor::stack(&edges)? })
}

/// One batch of an epoch plan.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedBatch {
    pub indices: Vec<usize>,
    pub scale: f64,
}

/// Shuffled batches and their scales for `epoch`; a pure function of the
/// arguments. The final batch may be short. Stream 0 of `seed` is left to
/// parameter initialisation.
pub fn epoch_plan(seed: u64, epoch: u64, len: usize, batch_size: usize, scales: &[f64]) -> Result<Vec<PlannedBatch>> {
    if batch_size == 0 || scales.is_empty() {
        return Err(Error::config("batch size and scale set must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| PlannedBatch { indices: c.to_vec(), scale: scales[rng.random_range(0..scales.len())] })
        .collect())
}

/// Training-set sizes of the two seen datasets.
pub const KVASIR_TRAIN: usize = 900;
pub const CLINICDB_TRAIN: usize = 550;

/// Seeded `(train, test)` partition of `ids`; the result does not depend on
/// the input order.
pub fn random_split(ids: &[String], n_train: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if n_train > ids.len() {
        return Err(Error::Dataset(format!("cannot take {n_train} training ids from {}", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = sorted.split_off(n_train);
    sorted.sort();
    test.sort();
    Ok((sorted, test))
}

/// One id per line; blank lines and `#` comments are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the edge map of every mask to `root/edges/<stem>.png`; returns the
/// number written.
pub fn prepare_edges(root: &Path, policy: MaskPolicy) -> Result<usize> {
    let masks = list_images(&root.join("masks"))?;
    let out_dir = root.join("edges");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for (stem, path) in &masks {
        let edge = make_edge_ground_truth(&read_mask(stem, path, policy)?);
        save_gray(&out_dir.join(format!("{stem}.png")), &edge, 255.0)?;
    }
    Ok(masks.len())
}

/// Writes channel 0 of a `1 x H x W x C` tensor as 8-bit grayscale.
pub fn save_gray(path: &Path, t: &Tensor, gain: f64) -> Result<()> {
    let s = t.shape();
    let buf: Vec<u8> = (0..s.h() * s.w())
        .map(|i| (t.at(0, i / s.w(), i % s.w(), 0) * gain).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(s.w() as u32, s.h() as u32, buf).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a `1 x H x W x 3` tensor in `[0, 1]` as 8-bit RGB.
pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.c() != 3 {
        return Err(Error::shape(format!("RGB output needs 3 channels, got {s:?}")));
    }
    let buf: Vec<u8> = t.data()[..s.h() * s.w() * 3].iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::RgbImage::from_raw(s.w() as u32, s.h() as u32, buf).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
