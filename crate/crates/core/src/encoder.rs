//! Backbone contract and the convolutional toy backbone.
//!
//! A backbone maps an `N x H x W x 3` image batch to four feature maps at
//! strides 4, 8, 16 and 32 whose channel widths never decrease with depth.
//! Any pretrained pyramid (for example a PVTv2 variant with widths
//! `(64, 128, 320, 512)`) can be plugged in by implementing [`Backbone`] and
//! registering its weights in the shared [`ParamStore`](crate::nn::ParamStore).

use crate::autograd::Var;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, ParamId};
use crate::tensor::Shape;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Encoder outputs `En_1 .. En_4`, finest first.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    /// Checks strides against the input size and the width ordering.
    pub fn validate(&self, ctx: &Ctx<'_>, input: Shape) -> Result<()> {
        let mut prev_c = 0;
        for (i, (&v, stride)) in self.levels.iter().zip(STRIDES).enumerate() {
            let s = ctx.g.shape(v);
            if s.n() != input.n() || s.h() * stride != input.h() || s.w() * stride != input.w() {
                return Err(Error::shape(format!(
                    "pyramid level {} is {s:?}, expected stride {stride} of input {input:?}",
                    i + 1
                )));
            }
            if s.c() < prev_c {
                return Err(Error::shape(format!("pyramid widths decrease at level {}", i + 1)));
            }
            prev_c = s.c();
        }
        Ok(())
    }
}

pub fn check_input_size(shape: Shape) -> Result<()> {
    if shape.c() != 3 {
        return Err(Error::shape(format!("expected a 3-channel image batch, got {shape:?}")));
    }
    if shape.h() % 32 != 0 || shape.w() % 32 != 0 || shape.h() == 0 || shape.w() == 0 {
        return Err(Error::shape(format!("input {}x{} is not a multiple of 32", shape.h(), shape.w())));
    }
    Ok(())
}

pub trait Backbone {
    /// Channel widths of `En_1 .. En_4`.
    fn channels(&self) -> [usize; 4];

    fn encode(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid>;

    /// Every parameter the backbone registered.
    fn params(&self) -> Vec<ParamId>;
}

struct Stage {
    down: Conv2d,
    convs: [Conv2d; 2],
}

/// Four convolutional stages: a 7x7 stride-4 stem, then 3x3 stride-2
/// reductions, each followed by two 3x3 convolutions with GELU.
pub struct ToyBackbone {
    stages: Vec<Stage>,
    channels: [usize; 4],
}

impl ToyBackbone {
    pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];

    pub fn new(b: &mut Builder<'_>, channels: [usize; 4]) -> Result<Self> {
        if channels.windows(2).any(|w| w[1] < w[0]) || channels.contains(&0) {
            return Err(Error::config(format!("backbone widths {channels:?} must be positive and non-decreasing")));
        }
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            let mut sb = b.sub(&format!("stage{}", i + 1));
            let down = if i == 0 {
                Conv2d::new(&mut sb, "stem", c_in, c, 7, ConvSpec::strided(4, 3))?
            } else {
                Conv2d::new(&mut sb, "down", c_in, c, 3, ConvSpec::strided(2, 1))?
            };
            let convs = [Conv2d::same(&mut sb, "conv1", c, c, 3)?, Conv2d::same(&mut sb, "conv2", c, c, 3)?];
            stages.push(Stage { down, convs });
            c_in = c;
        }
        Ok(ToyBackbone { stages, channels })
    }
}

impl Backbone for ToyBackbone {
    fn channels(&self) -> [usize; 4] {
        self.channels
    }

    fn encode(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid> {
        check_input_size(ctx.g.shape(image))?;
        let mut x = image;
        let mut levels = [image; 4];
        for (slot, stage) in levels.iter_mut().zip(&self.stages) {
            let y = stage.down.forward(ctx, x)?;
            x = ctx.g.gelu(y);
            for conv in &stage.convs {
                let y = conv.forward(ctx, x)?;
                x = ctx.g.gelu(y);
            }
            *slot = x;
        }
        Ok(FeaturePyramid { levels })
    }

    fn params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| std::iter::once(&s.down).chain(&s.convs))
            .flat_map(Conv2d::params)
            .collect()
    }
}
