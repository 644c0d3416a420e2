//! Overlap and error metrics per image and their split-level means.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(|P n G|, |P|, |G|)` over pixels with value `>= 0.5`.
pub fn overlap_counts(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize)> {
    check_pair(pred, gt)?;
    Ok(counts(pred, gt))
}

fn counts(pred: &Tensor, gt: &Tensor) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        c.0 += (p && g) as usize;
        c.1 += p as usize;
        c.2 += g as usize;
    }
    c
}

/// `2|P n G| / (|P| + |G|)`, or 1 when both are empty.
pub fn dice(pred_bin: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred_bin, gt)?;
    let (i, p, g) = counts(pred_bin, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P n G| / |P u G|`, or 1 when both are empty.
pub fn iou(pred_bin: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred_bin, gt)?;
    let (i, p, g) = counts(pred_bin, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Mean absolute difference on the continuous map.
pub fn mae(pred_prob: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred_prob, gt)?;
    if let Some(v) = pred_prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::shape(format!("probability map value {v} outside [0, 1]")));
    }
    let n = pred_prob.len().max(1) as f64;
    Ok(pred_prob.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

impl ImageMetrics {
    /// Scores one probability map against its mask.
    pub fn score(id: &str, prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<Self> {
        let bin = prob.map(|p| if p >= threshold { 1.0 } else { 0.0 });
        Ok(ImageMetrics { id: id.to_string(), dice: dice(&bin, gt)?, iou: iou(&bin, gt)?, mae: mae(prob, gt)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split_name: String,
    pub per_image: Vec<ImageMetrics>,
    pub m_dice: f64,
    pub m_iou: f64,
    pub mae_mean: f64,
}

pub const CSV_HEADER: &str = "id,dice,iou,mae";

impl MetricsReport {
    pub fn from_images(split_name: &str, per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Dataset(format!("split `{split_name}` has no images to evaluate")));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            split_name: split_name.to_string(),
            m_dice: mean(|m| m.dice),
            m_iou: mean(|m| m.iou),
            mae_mean: mean(|m| m.mae),
            per_image,
        })
    }

    /// One row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.per_image {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", m.id, m.dice, m.iou, m.mae);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", self.m_dice, self.m_iou, self.mae_mean);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "split {} ({} images): mDice {:.4}  mIoU {:.4}  MAE {:.4}\n",
            self.split_name,
            self.per_image.len(),
            self.m_dice,
            self.m_iou,
            self.mae_mean
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Anything that maps an image batch to per-pixel foreground probabilities.
pub trait Segmenter {
    /// `N x H x W x 3` in, `N x H x W x 1` probabilities out.
    fn predict_proba(&self, images: &Tensor) -> Result<Tensor>;
}

impl Segmenter for crate::model::Model {
    fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        crate::model::Model::predict_proba(self, images)
    }
}

/// Scores every sample of `split`, one image at a time.
pub fn evaluate(model: &dyn Segmenter, split: &DatasetSplit, threshold: f64) -> Result<MetricsReport> {
    if split.samples.is_empty() {
        return Err(Error::Dataset(format!("split `{}` is empty", split.name)));
    }
    let per_image = split
        .samples
        .iter()
        .map(|s| {
            let prob = model.predict_proba(&s.image)?;
            ImageMetrics::score(&s.id, &prob, &s.mask, threshold)
        })
        .collect::<Result<_>>()?;
    MetricsReport::from_images(&split.name, per_image)
}
