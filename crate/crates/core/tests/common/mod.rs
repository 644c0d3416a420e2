//! Central finite-difference checks shared by the gradient and acceptance
//! targets.
//!
//! Every case reduces its output `y` to `L = sum(r * y)` with a fixed random
//! `r`, so each check exercises a full vector-Jacobian product rather than a
//! single output coordinate.
#![allow(dead_code)]

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segt::autograd::Var;
use segt::cfm::{CascadeFusion, FuseStep};
use segt::cfp::{Cfp, CfpBlock};
use segt::eem::{EdgeExtractor, EDGE_WIDTH};
use segt::encoder::{Backbone, FeaturePyramid, ToyBackbone};
use segt::losses::{pixel_weight_map, structure_loss, total_loss};
use segt::model::{Model, ModelConfig};
use segt::nn::{Builder, Ctx, Mode, ParamKind, ParamStore};
use segt::seg::{ChannelAttention, EdgeGuide, GuidedFeatureSet, SegLevel, Separator, ShuffleAttention};
use segt::tensor::{Shape, Tensor};
use segt::Result;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that are zero in both forms compare equal.
pub const FLOOR: f64 = 1e-5;

type Forward = Box<dyn Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    /// Which inputs are differentiable (labels and edge maps are not).
    pub differentiable: Vec<bool>,
    pub mode: Mode,
    forward: Forward,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_rel < TOLERANCE
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn mask(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_bool(0.5) as u8 as f64)
}

impl GradCase {
    fn new(name: &'static str, store: ParamStore, inputs: Vec<(Tensor, bool)>, mode: Mode, forward: Forward) -> Self {
        let (inputs, differentiable) = inputs.into_iter().unzip();
        GradCase { name, store, inputs, differentiable, mode, forward }
    }

    fn output(&self, store: &ParamStore, inputs: &[Tensor]) -> Tensor {
        let mut ctx = Ctx::new(store, self.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let y = (self.forward)(&mut ctx, &vars).expect("forward pass");
        ctx.g.value(y).clone()
    }

    /// Compares analytic and central-difference gradients on up to
    /// `per_tensor` sampled coordinates of every trainable parameter and
    /// differentiable input.
    pub fn check(&self, per_tensor: usize, seed: u64) -> GradReport {
        self.check_scaled(per_tensor, seed, 1.0)
    }

    /// `check` with the analytic gradient multiplied by `scale`; anything
    /// other than 1 must fail.
    pub fn check_scaled(&self, per_tensor: usize, seed: u64, scale: f64) -> GradReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_tensor(self.output(&self.store, &self.inputs).shape(), &mut rng);
        let objective = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
            self.output(store, inputs).data().iter().zip(r.data()).map(|(y, r)| y * r).sum()
        };

        let mut ctx = Ctx::new(&self.store, self.mode);
        let vars: Vec<Var> = self.inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let y = (self.forward)(&mut ctx, &vars).expect("forward pass");
        let rv = ctx.input(r.clone());
        let weighted = ctx.g.mul(y, rv).expect("matching shapes");
        let loss = ctx.g.sum(weighted);
        let grads = ctx.g.backward(loss).expect("backward pass");
        let bound: Vec<_> = ctx.bound_params().collect();

        let mut report = GradReport { name: self.name, checked: 0, worst_rel: 0.0, worst_at: String::new() };
        let mut record = |where_: String, analytic: f64, numeric: f64| {
            let rel = rel_error(analytic * scale, numeric);
            report.checked += 1;
            if rel > report.worst_rel || rel.is_nan() {
                report.worst_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_at = format!("{where_}: analytic {analytic:.6e}, numeric {numeric:.6e}");
            }
        };

        for id in self.store.trainable() {
            let n = self.store.get(id).len();
            let analytic = bound.iter().find(|(b, _)| *b == id).and_then(|(_, v)| grads.get(*v));
            for k in sample(&mut rng, n, per_tensor.min(n)) {
                let mut store = self.store.clone();
                store.get_mut(id).data_mut()[k] += EPS;
                let plus = objective(&store, &self.inputs);
                store.get_mut(id).data_mut()[k] -= 2.0 * EPS;
                let minus = objective(&store, &self.inputs);
                let a = analytic.map_or(0.0, |g| g.data()[k]);
                record(format!("{}[{k}]", self.store.name(id)), a, (plus - minus) / (2.0 * EPS));
            }
        }
        for (i, t) in self.inputs.iter().enumerate() {
            if !self.differentiable[i] {
                continue;
            }
            let analytic = grads.get(vars[i]);
            for k in sample(&mut rng, t.len(), per_tensor.min(t.len())) {
                let mut inputs = self.inputs.clone();
                inputs[i].data_mut()[k] += EPS;
                let plus = objective(&self.store, &inputs);
                inputs[i].data_mut()[k] -= 2.0 * EPS;
                let minus = objective(&self.store, &inputs);
                let a = analytic.map_or(0.0, |g| g.data()[k]);
                record(format!("input{i}[{k}]"), a, (plus - minus) / (2.0 * EPS));
            }
        }
        report
    }
}

/// Moves batch-norm running moments off their defaults so eval-mode checks
/// are not trivially the identity.
fn perturb_buffers(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Buffer).collect();
    for id in ids {
        let is_var = store.name(id).ends_with("var");
        for v in store.get_mut(id).data_mut() {
            *v = if is_var { rng.random_range(0.5..1.5) } else { rng.random_range(-0.3..0.3) };
        }
    }
}

/// Non-zero biases and batch-norm affine terms so every parameter carries
/// signal.
fn perturb_trainable(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("gamma") {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            for v in store.get_mut(id).data_mut() {
                *v = base + rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn setup(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn finish(mut store: ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    perturb_trainable(&mut store, rng);
    perturb_buffers(&mut store, rng);
    store
}

// Feature tensors stay within 2x4x4x8; the fixed 32-channel edge feature and
// the 8:1 stride ratio of the edge extractor are the only exceptions.
const FEAT: Shape = Shape::new(2, 4, 4, 8);
const GATE: Shape = Shape::new(2, 2, 2, 1);

pub fn cfp_block(split: bool) -> GradCase {
    let (mut store, mut rng) = setup(11);
    // Split branches need the width divisible by the branch count.
    let (width, dilations): (usize, &[usize]) = if split { (9, &[1, 2, 3]) } else { (8, &[1, 2, 4]) };
    let block = CfpBlock::new(&mut Builder::new(&mut store, &mut rng), 6, width, dilations, split).unwrap();
    let x = random_tensor(Shape::new(2, 4, 4, 6), &mut rng);
    let store = finish(store, &mut rng);
    let name = if split { "cfp block (split branches)" } else { "cfp block (summed branches)" };
    GradCase::new(name, store, vec![(x, true)], Mode::Train, Box::new(move |ctx, v| block.forward(ctx, v[0])))
}

pub fn cfp_refine() -> GradCase {
    let (mut store, mut rng) = setup(12);
    let cfp = Cfp::new(&mut Builder::new(&mut store, &mut rng), [2, 3, 4, 4], 4, &[1, 2], false).unwrap();
    let shapes = [Shape::new(1, 4, 4, 2), Shape::new(1, 2, 2, 3), Shape::new(1, 1, 1, 4), Shape::new(1, 1, 1, 4)];
    let inputs = shapes.iter().map(|&s| (random_tensor(s, &mut rng), true)).collect();
    let store = finish(store, &mut rng);
    GradCase::new(
        "cfp pyramid refine",
        store,
        inputs,
        Mode::Train,
        Box::new(move |ctx, v| {
            let out = cfp.refine(ctx, &FeaturePyramid { levels: [v[0], v[1], v[2], v[3]] })?;
            // Mix every level into one output so all four blocks are checked.
            let mut acc = out.levels[0];
            for &l in &out.levels[1..] {
                let up = ctx.g.resize_like(l, out.levels[0]);
                acc = ctx.g.add(acc, up)?;
            }
            Ok(acc)
        }),
    )
}

pub fn eem() -> GradCase {
    let (mut store, mut rng) = setup(13);
    let eem = EdgeExtractor::new(&mut Builder::new(&mut store, &mut rng), 2, 8).unwrap();
    let en1 = random_tensor(Shape::new(1, 8, 8, 2), &mut rng);
    let en4 = random_tensor(Shape::new(1, 1, 1, 8), &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new(
        "edge extractor",
        store,
        vec![(en1, true), (en4, true)],
        Mode::Train,
        Box::new(move |ctx, v| {
            let out = eem.extract(ctx, v[0], v[1], 32, 32)?;
            // Both the edge feature and the edge map feed the objective.
            let fe = ctx.g.sum(out.f_e);
            let em = ctx.g.sum(out.em_logits);
            let p = ctx.g.sum(out.edge_prob);
            let s = ctx.g.add(fe, em)?;
            ctx.g.add(s, p)
        }),
    )
}

pub fn separator() -> GradCase {
    let (mut store, mut rng) = setup(14);
    let sep = Separator::new(&mut Builder::new(&mut store, &mut rng), 8, true).unwrap();
    let c = random_tensor(FEAT, &mut rng);
    let next = random_tensor(GATE, &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new(
        "separator",
        store,
        vec![(c, true), (next, true)],
        Mode::Train,
        Box::new(move |ctx, v| {
            let pair = sep.separate(ctx, v[0], Some(v[1]))?;
            let both = ctx.g.concat(&[pair.f_feat, pair.b_feat])?;
            let head = ctx.g.resize_like(pair.out_coarse, both);
            ctx.g.concat(&[both, head])
        }),
    )
}

pub fn edge_guide(mode: Mode) -> GradCase {
    let (mut store, mut rng) = setup(15);
    let mut b = Builder::new(&mut store, &mut rng);
    let sep = Separator::new(&mut b.sub("sep"), 8, true).unwrap();
    let guide = EdgeGuide::new(&mut b.sub("guide"), 8, 2).unwrap();
    let c = random_tensor(FEAT, &mut rng);
    let next = random_tensor(GATE, &mut rng);
    let f_e = random_tensor(Shape::new(2, 2, 2, EDGE_WIDTH), &mut rng);
    let store = finish(store, &mut rng);
    let name = if mode == Mode::Train { "edge guidance (batch statistics)" } else { "edge guidance (running statistics)" };
    GradCase::new(
        name,
        store,
        vec![(c, true), (next, true), (f_e, true)],
        mode,
        Box::new(move |ctx, v| {
            let pair = sep.separate(ctx, v[0], Some(v[1]))?;
            let out = guide.guide(ctx, &pair, v[2])?;
            ctx.g.concat(&[out.eg, out.egf, out.egb, out.attention])
        }),
    )
}

pub fn cam() -> GradCase {
    let (mut store, mut rng) = setup(16);
    let cam = ChannelAttention::new(&mut Builder::new(&mut store, &mut rng), 8, 4).unwrap();
    let x = random_tensor(FEAT, &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new("channel attention", store, vec![(x, true)], Mode::Train, Box::new(move |ctx, v| cam.gate(ctx, v[0])))
}

pub fn sam(groups: usize) -> GradCase {
    let (mut store, mut rng) = setup(17 + groups as u64);
    let sam = ShuffleAttention::new(&mut Builder::new(&mut store, &mut rng), 8, groups).unwrap();
    let x = random_tensor(FEAT, &mut rng);
    let store = finish(store, &mut rng);
    let name = if groups == 2 { "shuffle attention (2 groups)" } else { "shuffle attention (4 groups)" };
    GradCase::new(name, store, vec![(x, true)], Mode::Train, Box::new(move |ctx, v| sam.forward(ctx, v[0])))
}

pub fn seg_level() -> GradCase {
    let (mut store, mut rng) = setup(21);
    let level = SegLevel::new(&mut Builder::new(&mut store, &mut rng), 8, true, true, 2).unwrap();
    let c = random_tensor(FEAT, &mut rng);
    let next = random_tensor(GATE, &mut rng);
    let f_e = random_tensor(Shape::new(2, 4, 4, EDGE_WIDTH), &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new(
        "seg level",
        store,
        vec![(c, true), (next, true), (f_e, true)],
        Mode::Train,
        Box::new(move |ctx, v| {
            let (pair, eg) = level.forward(ctx, v[0], Some(v[1]), v[2])?;
            let head = ctx.g.resize_like(pair.out_coarse, eg);
            ctx.g.concat(&[eg, head])
        }),
    )
}

pub fn cfm_step() -> GradCase {
    let (mut store, mut rng) = setup(22);
    let step = FuseStep::new(&mut Builder::new(&mut store, &mut rng), 8).unwrap();
    let f_next = random_tensor(Shape::new(2, 2, 2, 8), &mut rng);
    let eg = random_tensor(FEAT, &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new(
        "cascade fusion step",
        store,
        vec![(f_next, true), (eg, true)],
        Mode::Train,
        Box::new(move |ctx, v| step.forward(ctx, v[0], v[1])),
    )
}

pub fn cfm_cascade(enabled: bool) -> GradCase {
    let (mut store, mut rng) = setup(23);
    let cfm = CascadeFusion::new(&mut Builder::new(&mut store, &mut rng), 4, enabled).unwrap();
    let shapes = [Shape::new(1, 4, 4, 4), Shape::new(1, 2, 2, 4), Shape::new(1, 1, 1, 4), Shape::new(1, 1, 1, 4)];
    let mut inputs: Vec<(Tensor, bool)> = shapes.iter().map(|&s| (random_tensor(s, &mut rng), true)).collect();
    inputs.push((random_tensor(Shape::new(1, 1, 1, 4), &mut rng), true));
    let store = finish(store, &mut rng);
    let name = if enabled { "cascade fusion" } else { "level sum without fusion" };
    GradCase::new(
        name,
        store,
        inputs,
        Mode::Train,
        Box::new(move |ctx, v| {
            let guided = GuidedFeatureSet { levels: [v[0], v[1], v[2], v[3]] };
            let out = cfm.fuse(ctx, &guided, v[4], 16, 16)?;
            ctx.g.concat(&[out.p_logits, out.final_logits])
        }),
    )
}

fn loss_inputs(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let shape = Shape::new(2, 4, 4, 1);
    let logits = random_tensor(shape, rng).map(|v| 3.0 * v);
    (logits, mask(shape, rng))
}

pub fn weighted_bce() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (z, gt) = loss_inputs(&mut rng);
    let w = Tensor::from_fn(gt.shape(), |_, _, _, _| rng.random_range(1.0..6.0));
    let (gt, w) = (Rc::new(gt), Rc::new(w));
    GradCase::new(
        "weighted bce",
        ParamStore::new(),
        vec![(z, true)],
        Mode::Train,
        Box::new(move |ctx, v| ctx.g.weighted_bce(v[0], gt.clone(), w.clone())),
    )
}

pub fn weighted_iou() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (z, gt) = loss_inputs(&mut rng);
    let w = Tensor::from_fn(gt.shape(), |_, _, _, _| rng.random_range(1.0..6.0));
    let (gt, w) = (Rc::new(gt), Rc::new(w));
    GradCase::new(
        "weighted iou",
        ParamStore::new(),
        vec![(z, true)],
        Mode::Train,
        Box::new(move |ctx, v| ctx.g.weighted_iou(v[0], gt.clone(), w.clone())),
    )
}

pub fn structure() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (z, gt) = loss_inputs(&mut rng);
    let w = Rc::new(pixel_weight_map(&gt));
    let gt = Rc::new(gt);
    GradCase::new(
        "structure loss (bce + iou)",
        ParamStore::new(),
        vec![(z, true)],
        Mode::Train,
        Box::new(move |ctx, v| structure_loss(&mut ctx.g, v[0], &gt, &w)),
    )
}

pub fn edge_bce() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let (z, gt) = loss_inputs(&mut rng);
    let ones = Rc::new(Tensor::full(gt.shape(), 1.0));
    let gt = Rc::new(gt);
    GradCase::new(
        "edge bce",
        ParamStore::new(),
        vec![(z, true)],
        Mode::Train,
        Box::new(move |ctx, v| ctx.g.weighted_bce(v[0], gt.clone(), ones.clone())),
    )
}

pub fn total() -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let shape = Shape::new(2, 4, 4, 1);
    let inputs: Vec<(Tensor, bool)> = (0..6).map(|_| (random_tensor(shape, &mut rng).map(|v| 3.0 * v), true)).collect();
    let gt = mask(shape, &mut rng);
    let edge = mask(shape, &mut rng);
    GradCase::new(
        "total loss",
        ParamStore::new(),
        inputs,
        Mode::Train,
        Box::new(move |ctx, v| Ok(total_loss(&mut ctx.g, v, &gt, &edge)?.total)),
    )
}

pub fn encoder() -> GradCase {
    let (mut store, mut rng) = setup(41);
    let enc = ToyBackbone::new(&mut Builder::new(&mut store, &mut rng), [2, 2, 4, 4]).unwrap();
    let x = random_tensor(Shape::new(1, 64, 64, 3), &mut rng);
    let store = finish(store, &mut rng);
    GradCase::new(
        "toy encoder",
        store,
        vec![(x, true)],
        Mode::Train,
        Box::new(move |ctx, v| {
            let p = enc.encode(ctx, v[0])?;
            let mut acc = ctx.g.sum(p.levels[0]);
            for &l in &p.levels[1..] {
                let s = ctx.g.sum(l);
                acc = ctx.g.add(acc, s)?;
            }
            Ok(acc)
        }),
    )
}

/// The training objective of a tiny end-to-end model.
pub fn full_model() -> GradCase {
    let config = ModelConfig { width: 8, backbone_channels: [2, 4, 4, 8], sam_groups: 2, ..ModelConfig::default() };
    let mut model = Model::new(&config, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    perturb_trainable(&mut model.store, &mut rng);
    // The final head starts at zero; give it weights so its path is checked.
    let ids: Vec<_> = model.store.trainable().filter(|&id| model.store.name(id).contains("eg1_head")).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let x = random_tensor(Shape::new(1, 64, 64, 3), &mut rng);
    let gt = mask(Shape::new(1, 64, 64, 1), &mut rng);
    let edge = mask(Shape::new(1, 64, 64, 1), &mut rng);
    let Model { net, store } = model;
    GradCase::new(
        "tiny model total loss",
        store,
        vec![(x, true)],
        Mode::Train,
        Box::new(move |ctx, v| {
            let out = net.forward(ctx, v[0])?;
            let terms = total_loss(&mut ctx.g, &out.supervised(), &gt, &edge)?;
            // The final map is not supervised; add it so its head is covered.
            let fin = ctx.g.sum(out.final_logits);
            let fin = ctx.g.affine(fin, 1e-3, 0.0);
            ctx.g.add(terms.total, fin)
        }),
    )
}

/// Every operation the acceptance suite requires, on small tensors.
pub fn operation_cases() -> Vec<GradCase> {
    vec![
        cfp_block(false),
        cfp_block(true),
        cfp_refine(),
        eem(),
        separator(),
        edge_guide(Mode::Train),
        edge_guide(Mode::Eval),
        cam(),
        sam(2),
        sam(4),
        seg_level(),
        cfm_step(),
        cfm_cascade(true),
        cfm_cascade(false),
        weighted_bce(),
        weighted_iou(),
        structure(),
        edge_bce(),
        total(),
    ]
}
