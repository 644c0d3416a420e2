//! Multi-receptive-field refinement of each encoder level to a common width.
//!
//! Each level is projected to `T` channels by a 1x1 convolution, then `K`
//! parallel 3x3 dilated convolutions (dilations 1, 2, 4 by default) read the
//! projection; their outputs are summed and added back to it:
//!
//! ```text
//! p   = Conv1x1(En_i)
//! C_i = p + sum_k Conv3x3_{d_k}(p)
//! ```
//!
//! In split mode branch `k` reads and writes only channel slice `k` of width
//! `T / K`, and the branch outputs are concatenated instead of summed.

use crate::autograd::Var;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, ParamId};

/// Decoder features `C_1 .. C_4`, all of width `T`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderFeatureSet {
    pub levels: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct CfpBlock {
    pub proj: Conv2d,
    pub branches: Vec<Conv2d>,
    pub split: bool,
    width: usize,
}

impl CfpBlock {
    pub fn new(b: &mut Builder<'_>, c_in: usize, width: usize, dilations: &[usize], split: bool) -> Result<Self> {
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::config(format!("invalid dilations {dilations:?}")));
        }
        let k = dilations.len();
        if split && width % k != 0 {
            return Err(Error::config(format!("width {width} is not divisible by {k} split branches")));
        }
        let proj = Conv2d::same(b, "proj", c_in, width, 1)?;
        let branch_width = if split { width / k } else { width };
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv2d::dilated(&mut b.sub(&format!("branch{i}")), "conv", branch_width, d))
            .collect::<Result<_>>()?;
        Ok(CfpBlock { proj, branches, split, width })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let p = self.proj.forward(ctx, x)?;
        let mut acc = p;
        if self.split {
            let bw = self.width / self.branches.len();
            let mut outs = Vec::with_capacity(self.branches.len());
            for (i, br) in self.branches.iter().enumerate() {
                let slice = ctx.g.slice_channels(p, i * bw, bw)?;
                outs.push(br.forward(ctx, slice)?);
            }
            let cat = ctx.g.concat(&outs)?;
            acc = ctx.g.add(acc, cat)?;
        } else {
            for br in &self.branches {
                let y = br.forward(ctx, p)?;
                acc = ctx.g.add(acc, y)?;
            }
        }
        Ok(acc)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(&self.proj).chain(&self.branches).flat_map(Conv2d::params).collect()
    }
}

/// One [`CfpBlock`] per pyramid level.
pub struct Cfp {
    pub blocks: Vec<CfpBlock>,
}

impl Cfp {
    pub fn new(b: &mut Builder<'_>, channels: [usize; 4], width: usize, dilations: &[usize], split: bool) -> Result<Self> {
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| CfpBlock::new(&mut b.sub(&format!("level{}", i + 1)), c, width, dilations, split))
            .collect::<Result<_>>()?;
        Ok(Cfp { blocks })
    }

    pub fn refine(&self, ctx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<DecoderFeatureSet> {
        let mut levels = pyramid.levels;
        for (slot, block) in levels.iter_mut().zip(&self.blocks) {
            *slot = block.forward(ctx, *slot)?;
        }
        Ok(DecoderFeatureSet { levels })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(CfpBlock::params).collect()
    }
}
