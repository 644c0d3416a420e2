//! Edge extractor: fuses the finest and coarsest encoder levels into the
//! shared edge feature `f_e` and the supervised edge logit map.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, ParamId};

pub const LOW_WIDTH: usize = 32;
pub const HIGH_WIDTH: usize = 256;
pub const EDGE_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug)]
pub struct EdgeBundle {
    /// Edge feature at stride 4, `EDGE_WIDTH` channels.
    pub f_e: Var,
    /// One-channel edge logits at input resolution.
    pub em_logits: Var,
    pub edge_prob: Var,
}

#[derive(Clone, Debug)]
pub struct EdgeExtractor {
    pub low_proj: Conv2d,
    pub high_proj: Conv2d,
    pub convs: [Conv2d; 2],
    pub head: Conv2d,
}

impl EdgeExtractor {
    pub fn new(b: &mut Builder<'_>, c_low: usize, c_high: usize) -> Result<Self> {
        Ok(EdgeExtractor {
            low_proj: Conv2d::same(b, "low_proj", c_low, LOW_WIDTH, 1)?,
            high_proj: Conv2d::same(b, "high_proj", c_high, HIGH_WIDTH, 1)?,
            convs: [
                Conv2d::same(b, "conv1", LOW_WIDTH + HIGH_WIDTH, EDGE_WIDTH, 3)?,
                Conv2d::same(b, "conv2", EDGE_WIDTH, EDGE_WIDTH, 3)?,
            ],
            head: Conv2d::same(b, "head", EDGE_WIDTH, 1, 1)?,
        })
    }

    /// `en1` at stride 4 and `en4` at stride 32 of an `out_h x out_w` input.
    pub fn extract(&self, ctx: &mut Ctx<'_>, en1: Var, en4: Var, out_h: usize, out_w: usize) -> Result<EdgeBundle> {
        let (s1, s4) = (ctx.g.shape(en1), ctx.g.shape(en4));
        if s4.h() * 8 != s1.h() || s4.w() * 8 != s1.w() || s1.h() * 4 != out_h || s1.w() * 4 != out_w {
            return Err(Error::shape(format!(
                "edge extractor needs strides 4/32 of {out_h}x{out_w}, got {s1:?} and {s4:?}"
            )));
        }
        let low = self.low_proj.forward(ctx, en1)?;
        let high = self.high_proj.forward(ctx, en4)?;
        let high = ctx.g.resize(high, s1.h(), s1.w());
        let mut x = ctx.g.concat(&[low, high])?;
        for conv in &self.convs {
            let y = conv.forward(ctx, x)?;
            x = ctx.g.gelu(y);
        }
        let f_e = x;
        let logits = self.head.forward(ctx, f_e)?;
        let em_logits = ctx.g.resize(logits, out_h, out_w);
        let edge_prob = ctx.g.sigmoid(em_logits);
        Ok(EdgeBundle { f_e, em_logits, edge_prob })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.low_proj, &self.high_proj, &self.convs[0], &self.convs[1], &self.head]
            .into_iter()
            .flat_map(Conv2d::params)
            .collect()
    }
}
