//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in evaluation
//! order. [`Graph::backward`] walks the tape in reverse from a scalar and
//! returns gradients for the leaves. Nodes are append-only, so a [`Var`] is a
//! plain index and the tape order is a valid topological order.

use std::rc::Rc;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{bilinear_taps, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Gelu(Var),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Resize(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Shuffle { x: Var, groups: usize },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Sum(Var),
    WeightedBce { z: Var, gt: Rc<Tensor>, w: Rc<Tensor> },
    WeightedIou { z: Var, gt: Rc<Tensor>, w: Rc<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Normalisation statistics for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Use the statistics of the current batch (training).
    Batch { eps: f64 },
    /// Use fixed running statistics (inference).
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Batch mean and unbiased variance per channel, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the differentiated scalar.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if s.0[i] == 1 && out.0[i] != 1 { 0 } else { st[i] };
    }
    r
}

/// Visits every output index with the matching offsets into `a` and `b`.
fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let (sa, sb) = (broadcast_strides(a, out), broadcast_strides(b, out));
    let [n, h, w, c] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..h {
            for i2 in 0..w {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..c {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = sa.broadcast(&sb)?;
        let mut out = Tensor::zeros(out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let od = out.data_mut();
        for_each_broadcast(out_shape, sa, sb, |o, ia, ib| od[o] = f(va[ia], vb[ib]));
        Ok(out)
    }

    /// Elementwise sum with broadcasting over unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product with broadcasting over unit dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(losses::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(out, Op::Conv { x, w, b, spec }))
    }

    /// Bilinear resampling (half-pixel centres); identity when sizes match.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if (s.h(), s.w()) == (h, w) {
            return x;
        }
        let out = self.value(x).resize_bilinear(h, w);
        self.push(out, Op::Resize(x))
    }

    /// Resamples `x` to the spatial size of `like`.
    pub fn resize_like(&mut self, x: Var, like: Var) -> Var {
        let s = self.shape(like);
        self.resize(x, s.h(), s.w())
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
                return Err(Error::shape(format!("concat: {first:?} vs {s:?}")));
            }
            c_total += s.c();
        }
        let out_shape = first.with_channels(c_total);
        let mut out = Vec::with_capacity(out_shape.numel());
        let pixels = first.n() * first.h() * first.w();
        for px in 0..pixels {
            for &p in parts {
                let c = self.shape(p).c();
                out.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c() || len == 0 {
            return Err(Error::shape(format!("channel slice {start}..{} of {s:?}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s.numel() / s.c() * len);
        for px in src.chunks_exact(s.c()) {
            out.extend_from_slice(&px[start..start + len]);
        }
        let out = Tensor::from_vec(s.with_channels(len), out)?;
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Interleaves `groups` contiguous channel groups: output channel
    /// `j * groups + g` is input channel `g * (C / groups) + j`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x);
        if groups == 0 || s.c() % groups != 0 {
            return Err(Error::shape(format!("{} channels do not split into {groups} groups", s.c())));
        }
        let out = shuffle_channels(self.value(x), groups);
        Ok(self.push(out, Op::Shuffle { x, groups }))
    }

    /// Mean over height and width: `N x 1 x 1 x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let hw = (s.h() * s.w()) as f64;
        let mut out = Tensor::zeros(Shape::new(s.n(), 1, 1, s.c()));
        let src = self.value(x);
        for b in 0..s.n() {
            for y in 0..s.h() {
                for xx in 0..s.w() {
                    let o = src.offset(b, y, xx, 0);
                    for k in 0..s.c() {
                        out.data_mut()[b * s.c() + k] += src.data()[o + k] / hw;
                    }
                }
            }
        }
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// Per-channel normalisation followed by `gamma * xhat + beta`.
    ///
    /// Returns the batch moments when `stats` is [`BnStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let s = self.shape(x);
        let c = s.c();
        let ch = Shape::new(1, 1, 1, c);
        self.value(gamma).expect_shape(ch)?;
        self.value(beta).expect_shape(ch)?;
        let src = self.value(x).data();
        let m = (s.numel() / c) as f64;
        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                for px in src.chunks_exact(c) {
                    mean.iter_mut().zip(px).for_each(|(a, v)| *a += v);
                }
                mean.iter_mut().for_each(|a| *a /= m);
                let mut var = vec![0.0; c];
                for px in src.chunks_exact(c) {
                    for k in 0..c {
                        var[k] += (px[k] - mean[k]).powi(2);
                    }
                }
                var.iter_mut().for_each(|a| *a /= m);
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("running statistics width mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(s);
        let mut out = Tensor::zeros(s);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (i, &v) in src.iter().enumerate() {
            let k = i % c;
            let xh = (v - mean[k]) * inv_std[k];
            xhat.data_mut()[i] = xh;
            out.data_mut()[i] = g[k] * xh + b[k];
        }
        let moments = batch_stats.then(|| BatchMoments {
            var_unbiased: var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect(),
            mean,
        });
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        Ok((v, moments))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Weighted binary cross-entropy of logits `z` (see [`losses::weighted_bce`]).
    pub fn weighted_bce(&mut self, z: Var, gt: Rc<Tensor>, w: Rc<Tensor>) -> Result<Var> {
        let v = losses::weighted_bce(self.value(z), &gt, &w)?;
        Ok(self.push(Tensor::scalar(v), Op::WeightedBce { z, gt, w }))
    }

    /// Weighted IoU loss of logits `z` (see [`losses::weighted_iou`]).
    pub fn weighted_iou(&mut self, z: Var, gt: Rc<Tensor>, w: Rc<Tensor>) -> Result<Var> {
        let v = losses::weighted_iou(self.value(z), &gt, &w)?;
        Ok(self.push(Tensor::scalar(v), Op::WeightedIou { z, gt, w }))
    }

    /// Differentiates the scalar `root` with respect to every node it
    /// depends on. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (mut ga, mut gb) = (Tensor::zeros(sa), Tensor::zeros(sb));
                {
                    let (da, db, g) = (ga.data_mut(), gb.data_mut(), gy.data());
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                        da[ia] += g[o];
                        db[ib] += g[o];
                    });
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            &Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (mut ga, mut gb) = (Tensor::zeros(sa), Tensor::zeros(sb));
                {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    let (da, db, g) = (ga.data_mut(), gb.data_mut(), gy.data());
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                        da[ia] += g[o] * vb[ib];
                        db[ib] += g[o] * va[ia];
                    });
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            &Op::Affine { x, scale } => acc(grads, x, gy.map(|g| g * scale)),
            &Op::Sigmoid(x) => {
                let gx = gy.zip_map(&node.value, |g, s| g * s * (1.0 - s))?;
                acc(grads, x, gx);
            }
            &Op::Gelu(x) => {
                let gx = gy.zip_map(self.value(x), |g, v| g * gelu_grad(v))?;
                acc(grads, x, gx);
            }
            &Op::Conv { x, w, b, spec } => {
                let cg = conv::conv2d_backward(self.value(x), self.value(w), spec, gy)?;
                acc(grads, x, cg.input);
                acc(grads, w, cg.weight);
                if let Some(b) = b {
                    acc(grads, b, cg.bias);
                }
            }
            &Op::Resize(x) => acc(grads, x, resize_backward(gy, self.shape(x))),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).c()).collect();
                let total: usize = widths.iter().sum();
                let mut outs: Vec<Vec<f64>> =
                    parts.iter().map(|&p| Vec::with_capacity(self.value(p).len())).collect();
                for px in gy.data().chunks_exact(total) {
                    let mut off = 0;
                    for (o, &wd) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&px[off..off + wd]);
                        off += wd;
                    }
                }
                for (&p, data) in parts.iter().zip(outs) {
                    acc(grads, p, Tensor::from_vec(self.shape(p), data)?);
                }
            }
            &Op::Slice { x, start } => {
                let s = self.shape(x);
                let len = out_shape.c();
                let mut gx = Tensor::zeros(s);
                for (dst, src) in gx.data_mut().chunks_exact_mut(s.c()).zip(gy.data().chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                acc(grads, x, gx);
            }
            &Op::Shuffle { x, groups } => {
                // The inverse of shuffling with `g` groups is shuffling with C/g.
                let c = out_shape.c();
                acc(grads, x, shuffle_channels(gy, c / groups));
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = (s.h() * s.w()) as f64;
                let gx = Tensor::from_fn(s, |b, _, _, k| gy.at(b, 0, 0, k) / hw);
                acc(grads, x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = out_shape.c();
                let m = (out_shape.numel() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&g, &xh)) in gy.data().iter().zip(xhat.data()).enumerate() {
                    sum_g[i % c] += g;
                    sum_gx[i % c] += g * xh;
                }
                let gam = self.value(*gamma).data();
                let mut gx = Tensor::zeros(out_shape);
                for (i, (&g, &xh)) in gy.data().iter().zip(xhat.data()).enumerate() {
                    let k = i % c;
                    gx.data_mut()[i] = if *batch_stats {
                        gam[k] * inv_std[k] / m * (m * g - sum_g[k] - xh * sum_gx[k])
                    } else {
                        g * gam[k] * inv_std[k]
                    };
                }
                let ch = Shape::new(1, 1, 1, c);
                acc(grads, *x, gx);
                acc(grads, *gamma, Tensor::from_vec(ch, sum_gx)?);
                acc(grads, *beta, Tensor::from_vec(ch, sum_g)?);
            }
            &Op::Sum(x) => acc(grads, x, Tensor::full(self.shape(x), gy.item())),
            Op::WeightedBce { z, gt, w } => {
                let mut g = losses::weighted_bce_grad(self.value(*z), gt, w);
                g.scale_in_place(gy.item());
                acc(grads, *z, g);
            }
            Op::WeightedIou { z, gt, w } => {
                let mut g = losses::weighted_iou_grad(self.value(*z), gt, w);
                g.scale_in_place(gy.item());
                acc(grads, *z, g);
            }
        }
        Ok(())
    }
}

pub(crate) fn shuffle_channels(x: &Tensor, groups: usize) -> Tensor {
    let s = x.shape();
    let c = s.c();
    let per = c / groups;
    let mut out = Tensor::zeros(s);
    for (dst, src) in out.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for g in 0..groups {
            for j in 0..per {
                dst[j * groups + g] = src[g * per + j];
            }
        }
    }
    out
}

fn resize_backward(gy: &Tensor, in_shape: Shape) -> Tensor {
    let [n, h, w, c] = in_shape.0;
    let (oh, ow) = (gy.shape().h(), gy.shape().w());
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let src = gy.offset(b, oy, ox, 0);
                for (iy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                    for (ix, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let dst = gx.offset(b, iy, ix, 0);
                        for k in 0..c {
                            gx.data_mut()[dst + k] += wgt * gy.data()[src + k];
                        }
                    }
                }
            }
        }
    }
    gx
}
