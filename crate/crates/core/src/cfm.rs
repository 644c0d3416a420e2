//! Cascade fusion of the edge-guided features into the prediction map.
//!
//! ```text
//! f_4 = C_4
//! f_i = Conv3x3(Concat(up(f_{i+1}) * EG_i, EG_i))      i = 3, 2, 1
//! P   = Conv1x1(sum_i up4(f_i))                         (then to input size)
//! ```
//!
//! `EG_4` does not enter the recursion. With fusion disabled the recursion is
//! replaced by `sum_i up4(EG_i)`. The inference map adds a one-channel head on
//! `EG_1` to `P` in logit space.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, ParamId};
use crate::seg::GuidedFeatureSet;

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `f_1 .. f_4` (the edge-guided features themselves when fusion is off).
    pub levels: [Var; 4],
    pub p_feature: Var,
    pub p_logits: Var,
    pub final_logits: Var,
}

/// One `Fusion(f, EG)` step followed by the width-restoring convolution.
#[derive(Clone, Debug)]
pub struct FuseStep {
    pub conv: Conv2d,
}

impl FuseStep {
    pub fn new(b: &mut Builder<'_>, width: usize) -> Result<Self> {
        Ok(FuseStep { conv: Conv2d::same(b, "conv", 2 * width, width, 3)? })
    }

    /// `Conv3x3(Concat(up(f_next) * eg, eg))` at `eg`'s resolution.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f_next: Var, eg: Var) -> Result<Var> {
        let (sf, se) = (ctx.g.shape(f_next), ctx.g.shape(eg));
        if sf.c() != se.c() {
            return Err(Error::shape(format!("fusion channel mismatch: {sf:?} vs {se:?}")));
        }
        let up = ctx.g.resize_like(f_next, eg);
        let prod = ctx.g.mul(up, eg)?;
        let cat = ctx.g.concat(&[prod, eg])?;
        self.conv.forward(ctx, cat)
    }
}

#[derive(Clone, Debug)]
pub struct CascadeFusion {
    /// Steps producing `f_3`, `f_2`, `f_1`; empty when fusion is disabled.
    pub steps: Vec<FuseStep>,
    pub p_head: Conv2d,
    pub eg1_head: Conv2d,
}

impl CascadeFusion {
    pub fn new(b: &mut Builder<'_>, width: usize, enabled: bool) -> Result<Self> {
        let steps = if enabled {
            (1..=3).rev().map(|i| FuseStep::new(&mut b.sub(&format!("fuse{i}")), width)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let p_head = Conv2d::same(b, "p_head", width, 1, 1)?;
        let eg1_head = Conv2d::same(b, "eg1_head", width, 1, 1)?;
        Ok(CascadeFusion { steps, p_head, eg1_head })
    }

    pub fn enabled(&self) -> bool {
        !self.steps.is_empty()
    }

    pub fn fuse(
        &self,
        ctx: &mut Ctx<'_>,
        guided: &GuidedFeatureSet,
        c4: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<FusionOutput> {
        let eg = guided.levels;
        let levels = if self.enabled() {
            let mut f = [c4; 4];
            for (step, i) in self.steps.iter().zip([2usize, 1, 0]) {
                f[i] = step.forward(ctx, f[i + 1], eg[i])?;
            }
            f
        } else {
            eg
        };
        let mut p_feature = levels[0];
        for &f in &levels[1..] {
            let up = ctx.g.resize_like(f, levels[0]);
            p_feature = ctx.g.add(p_feature, up)?;
        }
        let p = self.p_head.forward(ctx, p_feature)?;
        let p_logits = ctx.g.resize(p, out_h, out_w);
        let final_logits = self.final_prediction(ctx, eg[0], p_logits)?;
        Ok(FusionOutput { levels, p_feature, p_logits, final_logits })
    }

    /// `up(Conv1x1(EG_1)) + P` at the resolution of `p_logits`.
    pub fn final_prediction(&self, ctx: &mut Ctx<'_>, eg1: Var, p_logits: Var) -> Result<Var> {
        let head = self.eg1_head.forward(ctx, eg1)?;
        let head = ctx.g.resize_like(head, p_logits);
        ctx.g.add(head, p_logits)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.steps.iter().flat_map(|s| s.conv.params()).collect();
        p.extend(self.p_head.params());
        p.extend(self.eg1_head.params());
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

    fn guided(ctx: &mut Ctx<'_>, w: usize, fill: impl Fn(Shape) -> Tensor) -> GuidedFeatureSet {
        let levels = [16usize, 8, 4, 2].map(|s| ctx.input(fill(Shape::new(1, s, s, w))));
        GuidedFeatureSet { levels }
    }

    #[test]
    fn zero_guidance_leaves_only_the_deepest_level() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfm = CascadeFusion::new(&mut Builder::new(&mut store, &mut rng), 4, true).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let g = guided(&mut ctx, 4, Tensor::zeros);
        let c4t = rand_tensor(Shape::new(1, 2, 2, 4), &mut rng);
        let c4 = ctx.input(c4t.clone());
        let out = cfm.fuse(&mut ctx, &g, c4, 64, 64).unwrap();
        for i in 0..3 {
            assert!(ctx.g.value(out.levels[i]).data().iter().all(|&v| v == 0.0));
        }
        let want = c4t.resize_bilinear(16, 16);
        assert!(ctx.g.value(out.p_feature).max_abs_diff(&want) < 1e-12);
        assert_eq!(ctx.g.shape(out.p_logits), Shape::new(1, 64, 64, 1));
    }

    #[test]
    fn fusion_step_matches_scalar_oracle() {
        // One channel, 1x1 spatial: conv3x3 with zero padding reduces to its
        // centre taps, so f = w0 * (a * e) + w1 * e + bias.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let step = FuseStep::new(&mut Builder::new(&mut store, &mut rng), 1).unwrap();
        let w = store.get(step.conv.weight).clone();
        let (w0, w1) = (w.at(1, 1, 0, 0), w.at(1, 1, 1, 0));
        *store.get_mut(step.conv.bias.unwrap()) = Tensor::scalar(0.25);
        let (a, e) = (0.8, -1.3);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let fv = ctx.input(Tensor::scalar(a));
        let ev = ctx.input(Tensor::scalar(e));
        let out = step.forward(&mut ctx, fv, ev).unwrap();
        let want = w0 * (a * e) + w1 * e + 0.25;
        assert!((ctx.g.value(out).item() - want).abs() < 1e-15);
    }

    #[test]
    fn final_prediction_adds_in_logit_space() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfm = CascadeFusion::new(&mut Builder::new(&mut store, &mut rng), 4, true).unwrap();
        let eg1t = rand_tensor(Shape::new(1, 4, 4, 4), &mut rng);
        let pt = rand_tensor(Shape::new(1, 16, 16, 1), &mut rng);
        let head = crate::conv::conv2d(
            &eg1t,
            store.get(cfm.eg1_head.weight),
            Some(store.get(cfm.eg1_head.bias.unwrap())),
            crate::conv::ConvSpec::same(1, 1),
        )
        .unwrap()
        .resize_bilinear(16, 16);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let eg1 = ctx.input(eg1t.clone());
        let p = ctx.input(pt.clone());
        let out = cfm.final_prediction(&mut ctx, eg1, p).unwrap();
        let want = head.zip_map(&pt, |a, b| a + b).unwrap();
        assert!(ctx.g.value(out).max_abs_diff(&want) < 1e-12);

        // zero head: final = P
        store.get_mut(cfm.eg1_head.weight).data_mut().fill(0.0);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let eg1 = ctx.input(eg1t);
        let p = ctx.input(pt.clone());
        let out = cfm.final_prediction(&mut ctx, eg1, p).unwrap();
        assert_eq!(ctx.g.value(out), &pt);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let step = FuseStep::new(&mut Builder::new(&mut store, &mut rng), 4).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let f = ctx.input(Tensor::zeros(Shape::new(1, 2, 2, 3)));
        let e = ctx.input(Tensor::zeros(Shape::new(1, 4, 4, 4)));
        assert!(step.forward(&mut ctx, f, e).is_err());
    }

    #[test]
    fn disabled_fusion_sums_guided_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfm = CascadeFusion::new(&mut Builder::new(&mut store, &mut rng), 2, false).unwrap();
        assert!(!cfm.enabled());
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let g = guided(&mut ctx, 2, |s| Tensor::full(s, 1.0));
        let c4 = ctx.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let out = cfm.fuse(&mut ctx, &g, c4, 64, 64).unwrap();
        assert!(ctx.g.value(out.p_feature).data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}
