//! Deep-supervision losses.
//!
//! Every supervised logit map `z` is scored against the binary ground truth
//! `g` with the structure loss `L_t = L_wbce + L_wiou`, both weighted by the
//! pixel-difficulty map
//!
//! ```text
//! w = 1 + 5 * | avgpool31(g) - g |        (zero padding, divisor 31*31)
//! ```
//!
//! which is 1 deep inside uniform regions and approaches 6 at thin structures
//! and boundaries. Per image:
//!
//! ```text
//! L_wbce = sum(w * bce(z, g)) / sum(w)
//! L_wiou = 1 - (sum(w p g) + 1) / (sum(w (p + g)) - sum(w p g) + 1),  p = sigmoid(z)
//! ```
//!
//! and both are averaged over the batch. The total objective adds the four
//! coarse maps, the fused map and the unweighted edge BCE:
//! `L_total = sum_i L_t(F_i) + L_t(P) + L_edge`.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const WEIGHT_WINDOW: usize = 31;
pub const WEIGHT_GAIN: f64 = 5.0;

/// Pixel-difficulty weights for a batch of `N x H x W x 1` masks.
pub fn pixel_weight_map(gt: &Tensor) -> Tensor {
    let [n, h, w, c] = gt.shape().0;
    let r = WEIGHT_WINDOW / 2;
    let area = (WEIGHT_WINDOW * WEIGHT_WINDOW) as f64;
    let mut out = Tensor::zeros(gt.shape());
    // Summed-area table with a one-pixel zero border.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for b in 0..n {
        for k in 0..c {
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += gt.at(b, y, x, k);
                    sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
                }
            }
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
                for x in 0..w {
                    let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                    let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                        + sat[y0 * (w + 1) + x0];
                    let g = gt.at(b, y, x, k);
                    out.set(b, y, x, k, 1.0 + WEIGHT_GAIN * (s / area - g).abs());
                }
            }
        }
    }
    out
}

fn check_triplet(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<()> {
    if logits.shape().c() != 1 {
        return Err(Error::shape(format!("loss expects 1-channel logits, got {:?}", logits.shape())));
    }
    gt.expect_shape(logits.shape())?;
    w.expect_shape(logits.shape())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, stable for large `|z|`.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn per_image(shape: Shape) -> (usize, usize) {
    (shape.n(), shape.h() * shape.w() * shape.c())
}

pub fn weighted_bce(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    check_triplet(logits, gt, w)?;
    let (n, len) = per_image(logits.shape());
    let mut total = 0.0;
    for b in 0..n {
        let r = b * len..(b + 1) * len;
        let (z, y, wt) = (&logits.data()[r.clone()], &gt.data()[r.clone()], &w.data()[r]);
        let sw: f64 = wt.iter().sum();
        let s: f64 = z.iter().zip(y).zip(wt).map(|((&z, &y), &w)| w * bce_with_logit(z, y)).sum();
        total += s / sw;
    }
    Ok(total / n as f64)
}

pub(crate) fn weighted_bce_grad(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Tensor {
    let (n, len) = per_image(logits.shape());
    let mut g = Tensor::zeros(logits.shape());
    for b in 0..n {
        let r = b * len..(b + 1) * len;
        let sw: f64 = w.data()[r.clone()].iter().sum();
        let scale = 1.0 / (sw * n as f64);
        for i in r {
            g.data_mut()[i] = scale * w.data()[i] * (sigmoid(logits.data()[i]) - gt.data()[i]);
        }
    }
    g
}

fn iou_sums(z: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for ((&z, &y), &w) in z.iter().zip(y).zip(w) {
        let p = sigmoid(z);
        inter += w * p * y;
        total += w * (p + y);
    }
    (inter, total - inter)
}

pub fn weighted_iou(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Result<f64> {
    check_triplet(logits, gt, w)?;
    let (n, len) = per_image(logits.shape());
    let mut total = 0.0;
    for b in 0..n {
        let r = b * len..(b + 1) * len;
        let (inter, union) = iou_sums(&logits.data()[r.clone()], &gt.data()[r.clone()], &w.data()[r]);
        total += 1.0 - (inter + 1.0) / (union + 1.0);
    }
    Ok(total / n as f64)
}

pub(crate) fn weighted_iou_grad(logits: &Tensor, gt: &Tensor, w: &Tensor) -> Tensor {
    let (n, len) = per_image(logits.shape());
    let mut g = Tensor::zeros(logits.shape());
    for b in 0..n {
        let r = b * len..(b + 1) * len;
        let (inter, union) =
            iou_sums(&logits.data()[r.clone()], &gt.data()[r.clone()], &w.data()[r.clone()]);
        let (i1, u1) = (inter + 1.0, union + 1.0);
        for i in r {
            let (wi, yi) = (w.data()[i], gt.data()[i]);
            let p = sigmoid(logits.data()[i]);
            let dl_dp = -(wi * yi * u1 - i1 * wi * (1.0 - yi)) / (u1 * u1);
            g.data_mut()[i] = dl_dp * p * (1.0 - p) / n as f64;
        }
    }
    g
}

/// Plain mean BCE between edge logits and the edge ground truth.
pub fn edge_loss(logits: &Tensor, edge_gt: &Tensor) -> Result<f64> {
    weighted_bce(logits, edge_gt, &Tensor::full(logits.shape(), 1.0))
}

/// Scalar values of every supervised term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_edge: f64,
    pub l_t_f: [f64; 4],
    pub l_t_p: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l_edge.is_finite()
            && self.l_t_p.is_finite()
            && self.l_t_f.iter().all(|v| v.is_finite())
    }
}

/// The graph nodes of each supervised term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_edge: Var,
    pub l_t_f: [Var; 4],
    pub l_t_p: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_edge: g.value(self.l_edge).item(),
            l_t_f: self.l_t_f.map(|v| g.value(v).item()),
            l_t_p: g.value(self.l_t_p).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `L_t = L_wbce + L_wiou` on the graph.
pub fn structure_loss(g: &mut Graph, logits: Var, gt: &Rc<Tensor>, w: &Rc<Tensor>) -> Result<Var> {
    let bce = g.weighted_bce(logits, gt.clone(), w.clone())?;
    let iou = g.weighted_iou(logits, gt.clone(), w.clone())?;
    g.add(bce, iou)
}

/// Assembles the total objective from the six supervised maps, ordered
/// `[F_1, F_2, F_3, F_4, P, EM]`, all at ground-truth resolution.
///
/// The weight map is computed once from `gt` and shared by the five
/// structure-loss terms; the edge term is unweighted.
pub fn total_loss(g: &mut Graph, maps: &[Var], gt: &Tensor, edge_gt: &Tensor) -> Result<LossTerms> {
    if maps.len() < 6 {
        return Err(Error::shape(format!("total loss needs six supervised maps, got {}", maps.len())));
    }
    let gt = Rc::new(gt.clone());
    let w = Rc::new(pixel_weight_map(&gt));
    let mut l_t_f = [maps[0]; 4];
    for (slot, &m) in l_t_f.iter_mut().zip(&maps[..4]) {
        *slot = structure_loss(g, m, &gt, &w)?;
    }
    let l_t_p = structure_loss(g, maps[4], &gt, &w)?;
    let ones = Rc::new(Tensor::full(edge_gt.shape(), 1.0));
    let l_edge = g.weighted_bce(maps[5], Rc::new(edge_gt.clone()), ones)?;
    let mut total = l_t_p;
    for &t in &l_t_f {
        total = g.add(total, t)?;
    }
    total = g.add(total, l_edge)?;
    Ok(LossTerms { l_edge, l_t_f, l_t_p, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn weight_map_is_one_on_uniform_interiors() {
        for v in [0.0, 1.0] {
            let gt = Tensor::full(Shape::new(1, 40, 40, 1), v);
            let w = pixel_weight_map(&gt);
            // interior: the 31x31 window lies fully inside
            for y in 15..25 {
                for x in 15..25 {
                    assert!((w.at(0, y, x, 0) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weight_map_at_a_straight_boundary() {
        // Foreground is columns >= 20. The window of a pixel in column 20 holds
        // 16 of 31 foreground columns; its left neighbour holds 15.
        let gt = Tensor::from_fn(Shape::new(1, 48, 48, 1), |_, _, x, _| (x >= 20) as u8 as f64);
        let w = pixel_weight_map(&gt);
        let inside = 1.0 + 5.0 * (1.0 - 16.0 / 31.0);
        let outside = 1.0 + 5.0 * (15.0 / 31.0);
        assert!((w.at(0, 24, 20, 0) - inside).abs() < 1e-12);
        assert!((w.at(0, 24, 19, 0) - outside).abs() < 1e-12);
        // A window mean of exactly one half gives the midpoint weight 3.5;
        // with binary masks that needs a soft value, so check the formula on
        // one.
        let soft = Tensor::full(Shape::new(1, 40, 40, 1), 0.5);
        assert!((pixel_weight_map(&soft).at(0, 20, 20, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_reduces_to_mean_bce_and_ln2() {
        let z = Tensor::zeros(Shape::new(2, 3, 3, 1));
        let gt = Tensor::from_fn(z.shape(), |b, y, x, _| ((b + y + x) % 2) as f64);
        let ones = Tensor::full(z.shape(), 1.0);
        assert!((weighted_bce(&z, &gt, &ones).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_two_pixel_fixture() {
        let z = col(&[logit(0.9), logit(0.6)]);
        let gt = col(&[1.0, 1.0]);
        let w = col(&[1.0, 3.0]);
        let want = (-(0.9f64.ln()) - 3.0 * 0.6f64.ln()) / 4.0;
        let got = weighted_bce(&z, &gt, &w).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.4094).abs() < 1e-4);
    }

    #[test]
    fn saturated_predictions_cost_nothing() {
        let gt = col(&[1.0, 0.0, 1.0, 0.0]);
        let z = gt.map(|g| if g > 0.5 { 20.0 } else { -20.0 });
        let w = Tensor::full(gt.shape(), 1.0);
        assert!(weighted_bce(&z, &gt, &w).unwrap() < 1e-8);
        assert!(edge_loss(&z, &gt).unwrap() < 1e-8);
        assert!(weighted_iou(&z, &gt, &w).unwrap() < 1e-8);
    }

    #[test]
    fn weighted_iou_all_wrong_on_n_pixels() {
        for n in [1usize, 4, 25] {
            let z = Tensor::full(Shape::new(1, 1, n, 1), 60.0);
            let gt = Tensor::zeros(z.shape());
            let w = Tensor::full(z.shape(), 1.0);
            let want = 1.0 - 1.0 / (n as f64 + 1.0);
            assert!((weighted_iou(&z, &gt, &w).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_loss_hand_values() {
        let z = Tensor::zeros(Shape::new(1, 4, 4, 1));
        assert!((edge_loss(&z, &Tensor::zeros(z.shape())).unwrap() - 2f64.ln()).abs() < 1e-12);
        let one = col(&[logit(0.8)]);
        assert!((edge_loss(&one, &col(&[1.0])).unwrap() + 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let z = Tensor::zeros(Shape::new(1, 2, 2, 1));
        let gt = Tensor::zeros(Shape::new(1, 2, 3, 1));
        assert!(weighted_bce(&z, &gt, &Tensor::zeros(z.shape())).is_err());
        assert!(weighted_iou(&z, &z, &gt).is_err());
    }

    #[test]
    fn total_loss_requires_six_maps() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(Shape::new(1, 2, 2, 1)));
        let gt = Tensor::zeros(Shape::new(1, 2, 2, 1));
        assert!(total_loss(&mut g, &[z; 5], &gt, &gt).is_err());
        assert!(total_loss(&mut g, &[z; 6], &gt, &gt).is_ok());
    }
}
