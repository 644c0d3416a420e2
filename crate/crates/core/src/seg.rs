//! Separated edge guidance.
//!
//! Per decoder level `i` the separator splits `C_i` into complementary
//! foreground and background streams gated by the next-coarser prediction,
//!
//! ```text
//! g      = sigmoid(up(F_{i+1}))
//! f_feat = C_i * expand(g)            b_feat = C_i * expand(1 - g)
//! Out_i  = Conv1x1(f_feat)            (supervised coarse map)
//! ```
//!
//! and the edge guider conditions both streams on the shared edge feature:
//!
//! ```text
//! w    = CAM(f_feat + b_feat)
//! EGF  = BN_f(w * f_feat)       * Conv3x3_f(f_e) + Conv3x3_f(f_e)
//! EGB  = BN_b((1 - w) * b_feat) * Conv3x3_b(f_e) + Conv3x3_b(f_e)
//! EG_i = SAM(EGF + EGB)
//! ```
//!
//! `CAM` and `SAM` are compact stand-ins for the cited attention blocks with
//! the same interface and output range; see [`ChannelAttention`] and
//! [`ShuffleAttention`].

use crate::autograd::Var;
use crate::eem::EDGE_WIDTH;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Ctx, ParamId};

pub const CAM_REDUCTION: usize = 4;
pub const SAM_REDUCTION: usize = 2;

/// Two-scale channel attention.
///
/// A local branch (pointwise bottleneck on every pixel) and a global branch
/// (the same bottleneck on the spatial mean) are summed and squashed:
/// `gate = sigmoid(B_local(x) + B_global(gap(x)))`, shape `N x H x W x T`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub local: [Conv2d; 2],
    pub global: [Conv2d; 2],
}

fn bottleneck(b: &mut Builder<'_>, name: &str, c: usize, hidden: usize) -> Result<[Conv2d; 2]> {
    let mut b = b.sub(name);
    Ok([Conv2d::same(&mut b, "reduce", c, hidden, 1)?, Conv2d::same(&mut b, "expand", hidden, c, 1)?])
}

fn run_bottleneck(ctx: &mut Ctx<'_>, convs: &[Conv2d; 2], x: Var) -> Result<Var> {
    let h = convs[0].forward(ctx, x)?;
    let h = ctx.g.gelu(h);
    convs[1].forward(ctx, h)
}

impl ChannelAttention {
    pub fn new(b: &mut Builder<'_>, width: usize, reduction: usize) -> Result<Self> {
        let hidden = width / reduction;
        if hidden == 0 {
            return Err(Error::config(format!(
                "channel attention needs width >= {reduction}, got {width}"
            )));
        }
        Ok(ChannelAttention {
            local: bottleneck(b, "local", width, hidden)?,
            global: bottleneck(b, "global", width, hidden)?,
        })
    }

    pub fn gate(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let local = run_bottleneck(ctx, &self.local, x)?;
        let pooled = ctx.g.global_avg_pool(x);
        let global = run_bottleneck(ctx, &self.global, pooled)?;
        let sum = ctx.g.add(local, global)?;
        Ok(ctx.g.sigmoid(sum))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.local.iter().chain(&self.global).flat_map(Conv2d::params).collect()
    }
}

#[derive(Clone, Debug)]
struct SaGroup {
    channel: [Conv2d; 2],
    spatial: Conv2d,
}

/// Grouped channel-and-spatial gating followed by a channel shuffle.
///
/// Channels are split into `groups` contiguous groups. Each group `x_g` is
/// multiplied by a channel gate `sigmoid(B(gap(x_g)))` (bottleneck reduction
/// 2) and a spatial gate `sigmoid(Conv1x1(x_g))` with one output channel; the
/// gated groups are concatenated and interleaved by a channel shuffle.
#[derive(Clone, Debug)]
pub struct ShuffleAttention {
    groups: Vec<SaGroup>,
    group_width: usize,
}

impl ShuffleAttention {
    pub fn new(b: &mut Builder<'_>, width: usize, groups: usize) -> Result<Self> {
        if groups == 0 || width % groups != 0 {
            return Err(Error::config(format!("width {width} is not divisible into {groups} attention groups")));
        }
        let group_width = width / groups;
        let hidden = group_width / SAM_REDUCTION;
        if hidden == 0 {
            return Err(Error::config(format!("attention groups of width {group_width} are too narrow")));
        }
        let groups = (0..groups)
            .map(|i| {
                let mut gb = b.sub(&format!("group{i}"));
                Ok(SaGroup {
                    channel: bottleneck(&mut gb, "channel", group_width, hidden)?,
                    spatial: Conv2d::same(&mut gb, "spatial", group_width, 1, 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ShuffleAttention { groups, group_width })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.groups.len());
        for (i, grp) in self.groups.iter().enumerate() {
            let xg = if self.groups.len() == 1 { x } else { ctx.g.slice_channels(x, i * self.group_width, self.group_width)? };
            let pooled = ctx.g.global_avg_pool(xg);
            let cg = run_bottleneck(ctx, &grp.channel, pooled)?;
            let cg = ctx.g.sigmoid(cg);
            let sg = grp.spatial.forward(ctx, xg)?;
            let sg = ctx.g.sigmoid(sg);
            let y = ctx.g.mul(xg, cg)?;
            outs.push(ctx.g.mul(y, sg)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        let cat = ctx.g.concat(&outs)?;
        ctx.g.channel_shuffle(cat, self.groups.len())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.groups
            .iter()
            .flat_map(|g| g.channel.iter().chain(std::iter::once(&g.spatial)))
            .flat_map(Conv2d::params)
            .collect()
    }
}

/// Foreground and background streams of one level.
#[derive(Clone, Copy, Debug)]
pub struct StreamPair {
    pub f_feat: Var,
    pub b_feat: Var,
    /// One-channel coarse logits `Out_i` at the level's stride.
    pub out_coarse: Var,
    /// `(sigmoid(up(F_{i+1})), 1 - sigmoid(up(F_{i+1})))`; `None` with the
    /// separator disabled, where both gates are identically one.
    pub gates: Option<(Var, Var)>,
}

/// The per-level supervision head `Out_i = Conv1x1(f_feat)` plus the gating.
#[derive(Clone, Debug)]
pub struct Separator {
    pub head: Conv2d,
    pub enabled: bool,
}

impl Separator {
    pub fn new(b: &mut Builder<'_>, width: usize, enabled: bool) -> Result<Self> {
        Ok(Separator { head: Conv2d::same(b, "head", width, 1, 1)?, enabled })
    }

    /// `coarse_next` is the one-channel logit map of level `i + 1` (or the
    /// global seed map at level 4); it is ignored when the separator is off.
    pub fn separate(&self, ctx: &mut Ctx<'_>, c_i: Var, coarse_next: Option<Var>) -> Result<StreamPair> {
        let (f_feat, b_feat, gates) = if self.enabled {
            let next = coarse_next.ok_or_else(|| Error::shape("separator needs a coarser prediction"))?;
            if ctx.g.shape(next).c() != 1 {
                return Err(Error::shape("separator gate must have one channel"));
            }
            let up = ctx.g.resize_like(next, c_i);
            let fg = ctx.g.sigmoid(up);
            let bg = ctx.g.one_minus(fg);
            let f = ctx.g.mul(c_i, fg)?;
            let b = ctx.g.mul(c_i, bg)?;
            (f, b, Some((fg, bg)))
        } else {
            (c_i, c_i, None)
        };
        let out_coarse = self.head.forward(ctx, f_feat)?;
        Ok(StreamPair { f_feat, b_feat, out_coarse, gates })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.head.params()
    }
}

/// Intermediate values of one edge-guidance evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GuideOutput {
    pub attention: Var,
    pub egf: Var,
    pub egb: Var,
    pub eg: Var,
}

#[derive(Clone, Debug)]
pub struct EdgeGuide {
    pub edge_fg: Conv2d,
    pub edge_bg: Conv2d,
    pub cam: ChannelAttention,
    pub bn_fg: BatchNorm2d,
    pub bn_bg: BatchNorm2d,
    pub sam: ShuffleAttention,
}

impl EdgeGuide {
    pub fn new(b: &mut Builder<'_>, width: usize, sam_groups: usize) -> Result<Self> {
        Ok(EdgeGuide {
            edge_fg: Conv2d::same(b, "edge_fg", EDGE_WIDTH, width, 3)?,
            edge_bg: Conv2d::same(b, "edge_bg", EDGE_WIDTH, width, 3)?,
            cam: ChannelAttention::new(&mut b.sub("cam"), width, CAM_REDUCTION)?,
            bn_fg: BatchNorm2d::new(b, "bn_fg", width)?,
            bn_bg: BatchNorm2d::new(b, "bn_bg", width)?,
            sam: ShuffleAttention::new(&mut b.sub("sam"), width, sam_groups)?,
        })
    }

    /// Applies the edge guider; `f_e` is resized to the level first.
    pub fn guide(&self, ctx: &mut Ctx<'_>, pair: &StreamPair, f_e: Var) -> Result<GuideOutput> {
        let fe = ctx.g.resize_like(f_e, pair.f_feat);
        let both = ctx.g.add(pair.f_feat, pair.b_feat)?;
        let attention = self.cam.gate(ctx, both)?;
        let inverse = ctx.g.one_minus(attention);
        let egf = self.stream(ctx, attention, pair.f_feat, &self.bn_fg, &self.edge_fg, fe)?;
        let egb = self.stream(ctx, inverse, pair.b_feat, &self.bn_bg, &self.edge_bg, fe)?;
        let merged = ctx.g.add(egf, egb)?;
        let eg = self.sam.forward(ctx, merged)?;
        Ok(GuideOutput { attention, egf, egb, eg })
    }

    /// `BN(gate * feat) * E + E` with `E = Conv3x3(f_e)`.
    fn stream(
        &self,
        ctx: &mut Ctx<'_>,
        gate: Var,
        feat: Var,
        bn: &BatchNorm2d,
        edge: &Conv2d,
        fe: Var,
    ) -> Result<Var> {
        let gated = ctx.g.mul(gate, feat)?;
        let normed = bn.forward(ctx, gated)?;
        let e = edge.forward(ctx, fe)?;
        let cond = ctx.g.mul(normed, e)?;
        ctx.g.add(cond, e)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.edge_fg.params();
        p.extend(self.edge_bg.params());
        p.extend(self.cam.params());
        p.extend(self.bn_fg.params());
        p.extend(self.bn_bg.params());
        p.extend(self.sam.params());
        p
    }
}

/// Edge-guided features `EG_1 .. EG_4`.
#[derive(Clone, Copy, Debug)]
pub struct GuidedFeatureSet {
    pub levels: [Var; 4],
}

/// Separator plus optional edge guider for one level.
#[derive(Clone, Debug)]
pub struct SegLevel {
    pub separator: Separator,
    pub guide: Option<EdgeGuide>,
}

impl SegLevel {
    pub fn new(b: &mut Builder<'_>, width: usize, use_se: bool, use_eg: bool, sam_groups: usize) -> Result<Self> {
        let separator = Separator::new(&mut b.sub("separator"), width, use_se)?;
        let guide = if use_eg { Some(EdgeGuide::new(&mut b.sub("guide"), width, sam_groups)?) } else { None };
        Ok(SegLevel { separator, guide })
    }

    /// Returns the stream pair and `EG_i`; without the edge guider
    /// `EG_i = f_feat + b_feat`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, c_i: Var, coarse_next: Option<Var>, f_e: Var) -> Result<(StreamPair, Var)> {
        let pair = self.separator.separate(ctx, c_i, coarse_next)?;
        let eg = match &self.guide {
            Some(guide) => guide.guide(ctx, &pair, f_e)?.eg,
            None => ctx.g.add(pair.f_feat, pair.b_feat)?,
        };
        Ok((pair, eg))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.separator.params();
        if let Some(g) = &self.guide {
            p.extend(g.params());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn zero_all(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn saturated_gates_route_everything_to_one_stream() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sep = Separator::new(&mut Builder::new(&mut store, &mut rng), 8, true).unwrap();
        let c = rand_tensor(Shape::new(1, 4, 4, 8), &mut rng);
        for (logit, fg_is_c) in [(40.0, true), (-40.0, false)] {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let cv = ctx.input(c.clone());
            let next = ctx.input(Tensor::full(Shape::new(1, 2, 2, 1), logit));
            let pair = sep.separate(&mut ctx, cv, Some(next)).unwrap();
            let (f, b) = (ctx.g.value(pair.f_feat), ctx.g.value(pair.b_feat));
            let (full, empty) = if fg_is_c { (f, b) } else { (b, f) };
            assert!(full.max_abs_diff(&c) < 1e-15);
            assert!(empty.data().iter().all(|v| v.abs() < 1e-15));
            assert_eq!(ctx.g.shape(pair.out_coarse), Shape::new(1, 4, 4, 1));
        }
    }

    #[test]
    fn disabled_separator_passes_features_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sep = Separator::new(&mut Builder::new(&mut store, &mut rng), 8, false).unwrap();
        let c = rand_tensor(Shape::new(1, 4, 4, 8), &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let cv = ctx.input(c);
        let pair = sep.separate(&mut ctx, cv, None).unwrap();
        assert_eq!(pair.f_feat, cv);
        assert_eq!(pair.b_feat, cv);
        assert!(pair.gates.is_none());
    }

    #[test]
    fn cam_range_zero_init_and_width_limit() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = ChannelAttention::new(&mut Builder::new(&mut store, &mut rng), 8, 4).unwrap();
        let x = rand_tensor(Shape::new(2, 3, 3, 8), &mut rng).map(|v| 30.0 * v);
        {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let xv = ctx.input(x.clone());
            let g = cam.gate(&mut ctx, xv).unwrap();
            assert!(ctx.g.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        zero_all(&mut store, &cam.params());
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.input(x);
        let g = cam.gate(&mut ctx, xv).unwrap();
        assert!(ctx.g.value(g).data().iter().all(|&v| v == 0.5));

        let mut store = ParamStore::new();
        assert!(ChannelAttention::new(&mut Builder::new(&mut store, &mut rng), 3, 4).is_err());
    }

    #[test]
    fn sam_zero_init_quarters_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(Shape::new(1, 3, 3, 8), &mut rng);
        for groups in [1, 2, 4] {
            let mut store = ParamStore::new();
            let sam = ShuffleAttention::new(&mut Builder::new(&mut store, &mut rng), 8, groups).unwrap();
            zero_all(&mut store, &sam.params());
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let xv = ctx.input(x.clone());
            let y = sam.forward(&mut ctx, xv).unwrap();
            let want = crate::autograd::shuffle_channels(&x.map(|v| 0.25 * v), groups);
            assert!(ctx.g.value(y).max_abs_diff(&want) < 1e-15, "groups {groups}");
        }
        let mut store = ParamStore::new();
        assert!(ShuffleAttention::new(&mut Builder::new(&mut store, &mut rng), 8, 3).is_err());
    }

    #[test]
    fn zero_edge_feature_silences_guidance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let guide = EdgeGuide::new(&mut Builder::new(&mut store, &mut rng), 8, 2).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let f = ctx.input(rand_tensor(Shape::new(2, 4, 4, 8), &mut rng));
        let b = ctx.input(rand_tensor(Shape::new(2, 4, 4, 8), &mut rng));
        let out_coarse = ctx.input(Tensor::zeros(Shape::new(2, 4, 4, 1)));
        let fe = ctx.input(Tensor::zeros(Shape::new(2, 8, 8, EDGE_WIDTH)));
        let pair = StreamPair { f_feat: f, b_feat: b, out_coarse, gates: None };
        let out = guide.guide(&mut ctx, &pair, fe).unwrap();
        assert!(ctx.g.value(out.eg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_attention_treats_streams_symmetrically() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let guide = EdgeGuide::new(&mut Builder::new(&mut store, &mut rng), 8, 2).unwrap();
        zero_all(&mut store, &guide.cam.params());
        // identical edge projections for both streams
        let (wf, bf) = (guide.edge_fg.weight, guide.edge_fg.bias.unwrap());
        let (wb, bb) = (guide.edge_bg.weight, guide.edge_bg.bias.unwrap());
        *store.get_mut(wb) = store.get(wf).clone();
        *store.get_mut(bb) = store.get(bf).clone();
        let feat = rand_tensor(Shape::new(2, 4, 4, 8), &mut rng);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let f = ctx.input(feat.clone());
        let b = ctx.input(feat);
        let oc = ctx.input(Tensor::zeros(Shape::new(2, 4, 4, 1)));
        let fe = ctx.input(rand_tensor(Shape::new(2, 4, 4, EDGE_WIDTH), &mut rng));
        let out = guide.guide(&mut ctx, &StreamPair { f_feat: f, b_feat: b, out_coarse: oc, gates: None }, fe).unwrap();
        assert!(ctx.g.value(out.attention).data().iter().all(|&v| v == 0.5));
        assert!(ctx.g.value(out.egf).max_abs_diff(ctx.g.value(out.egb)) < 1e-12);
    }
}
