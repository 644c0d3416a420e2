//! The assembled network and its ablation switches.
//!
//! ```text
//! image -> backbone -> En_1..En_4 -> CFP -> C_1..C_4
//!                      En_1, En_4 -> edge extractor -> f_e, EM
//! C_4 -> seed head ----------------------+
//! for i = 4..1:  SEG_i(C_i, Out_{i+1}, f_e) -> Out_i, EG_i
//! EG_1..EG_4, C_4 -> cascade fusion -> P, final
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::cfm::{CascadeFusion, FusionOutput};
use crate::cfp::{Cfp, DecoderFeatureSet};
use crate::eem::{EdgeBundle, EdgeExtractor};
use crate::encoder::{check_input_size, Backbone, FeaturePyramid, ToyBackbone};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, Mode, ParamId, ParamStore};
use crate::seg::{GuidedFeatureSet, SegLevel, StreamPair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    /// Supplied by the caller through [`SegT::with_backbone`].
    Plugged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub use_se: bool,
    pub use_eg: bool,
    pub use_cfm: bool,
    /// Common decoder width `T`.
    pub width: usize,
    pub backbone: BackboneKind,
    pub backbone_channels: [usize; 4],
    pub cfp_dilations: Vec<usize>,
    pub cfp_split: bool,
    pub sam_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_se: true,
            use_eg: true,
            use_cfm: true,
            width: 32,
            backbone: BackboneKind::Toy,
            backbone_channels: ToyBackbone::DEFAULT_CHANNELS,
            cfp_dilations: vec![1, 2, 4],
            cfp_split: false,
            sam_groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (use_se, use_eg, use_cfm) = v.toggles();
        ModelConfig { use_se, use_eg, use_cfm, ..Self::default() }
    }
}

/// The seven ablation wirings, `A` (baseline) through `G` (full model).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F, Variant::G];

    /// `(use_se, use_eg, use_cfm)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::A => (false, false, false),
            Variant::B => (true, false, false),
            Variant::C => (true, true, false),
            Variant::D => (false, false, true),
            Variant::E => (false, true, true),
            Variant::F => (true, false, true),
            Variant::G => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "baseline",
            Variant::B => "SE",
            Variant::C => "SE+EG",
            Variant::D => "CFM",
            Variant::E => "EG+CFM",
            Variant::F => "SE+CFM",
            Variant::G => "SE+EG+CFM",
        }
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Coarse maps `F_1 .. F_4` as logits at input resolution.
    pub coarse: [Var; 4],
    pub p_logits: Var,
    pub edge_logits: Var,
    /// Inference map in logit space.
    pub final_logits: Var,
    /// The level-4 gate source; `None` without the separator.
    pub seed: Option<Var>,
    pub pyramid: FeaturePyramid,
    pub decoder: DecoderFeatureSet,
    pub edge: EdgeBundle,
    pub streams: [StreamPair; 4],
    pub guided: GuidedFeatureSet,
    pub fusion: FusionOutput,
}

impl ForwardOutput {
    /// The six supervised maps in loss order: `F_1..F_4, P, EM`.
    pub fn supervised(&self) -> [Var; 6] {
        let [f1, f2, f3, f4] = self.coarse;
        [f1, f2, f3, f4, self.p_logits, self.edge_logits]
    }
}

pub struct SegT {
    pub config: ModelConfig,
    pub backbone: Box<dyn Backbone>,
    pub cfp: Cfp,
    pub eem: EdgeExtractor,
    pub seed_head: Option<Conv2d>,
    /// `levels[i]` handles decoder level `i + 1`.
    pub levels: Vec<SegLevel>,
    pub cfm: CascadeFusion,
}

impl SegT {
    /// Registers every parameter in `store`, drawing initial values from `rng`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.backbone == BackboneKind::Plugged {
            return Err(Error::config("a plugged backbone must be passed to SegT::with_backbone"));
        }
        let backbone = {
            let mut b = Builder::new(store, rng);
            ToyBackbone::new(&mut b.sub("encoder"), config.backbone_channels)?
        };
        Self::with_backbone(config, Box::new(backbone), store, rng)
    }

    /// Builds the decoder around a backbone whose parameters are already in
    /// `store`.
    pub fn with_backbone(
        config: &ModelConfig,
        backbone: Box<dyn Backbone>,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let channels = backbone.channels();
        let width = config.width;
        let mut b = Builder::new(store, rng);
        let cfp = Cfp::new(&mut b.sub("cfp"), channels, width, &config.cfp_dilations, config.cfp_split)?;
        let eem = EdgeExtractor::new(&mut b.sub("eem"), channels[0], channels[3])?;
        let seed_head = if config.use_se { Some(Conv2d::same(&mut b, "seed_head", width, 1, 1)?) } else { None };
        let levels = (1..=4)
            .map(|i| {
                SegLevel::new(&mut b.sub(&format!("seg{i}")), width, config.use_se, config.use_eg, config.sam_groups)
            })
            .collect::<Result<_>>()?;
        let cfm = CascadeFusion::new(&mut b.sub("cfm"), width, config.use_cfm)?;
        // The EG_1 head has no loss term; it starts at zero so final = P.
        for id in cfm.eg1_head.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(SegT { config: config.clone(), backbone, cfp, eem, seed_head, levels, cfm })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<ForwardOutput> {
        let input = ctx.g.shape(image);
        check_input_size(input)?;
        let (h, w) = (input.h(), input.w());
        let pyramid = self.backbone.encode(ctx, image)?;
        pyramid.validate(ctx, input)?;
        let decoder = self.cfp.refine(ctx, &pyramid)?;
        let edge = self.eem.extract(ctx, pyramid.levels[0], pyramid.levels[3], h, w)?;
        let c = decoder.levels;

        let seed = match &self.seed_head {
            Some(head) => Some(head.forward(ctx, c[3])?),
            None => None,
        };
        let mut next = seed;
        let mut streams = Vec::with_capacity(4);
        let mut guided = [c[0]; 4];
        for i in (0..4).rev() {
            let (pair, eg) = self.levels[i].forward(ctx, c[i], next, edge.f_e)?;
            next = Some(pair.out_coarse);
            guided[i] = eg;
            streams.push(pair);
        }
        streams.reverse();
        let streams: [StreamPair; 4] = streams.try_into().expect("four levels");
        let guided = GuidedFeatureSet { levels: guided };

        let fusion = self.cfm.fuse(ctx, &guided, c[3], h, w)?;
        let coarse = streams.map(|s| ctx.g.resize(s.out_coarse, h, w));
        Ok(ForwardOutput {
            coarse,
            p_logits: fusion.p_logits,
            edge_logits: edge.em_logits,
            final_logits: fusion.final_logits,
            seed,
            pyramid,
            decoder,
            edge,
            streams,
            guided,
            fusion,
        })
    }

    /// Every parameter the network registered, backbone first.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.backbone.params();
        p.extend(self.cfp.params());
        p.extend(self.eem.params());
        if let Some(h) = &self.seed_head {
            p.extend(h.params());
        }
        for l in &self.levels {
            p.extend(l.params());
        }
        p.extend(self.cfm.params());
        p
    }
}

/// A network together with the store holding its parameters.
pub struct Model {
    pub net: SegT,
    pub store: ParamStore,
}

impl Model {
    /// Fresh toy-backbone model initialised from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegT::new(config, &mut store, &mut rng)?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Inference-path logits (`final_logits`) for an `N x H x W x 3` batch.
    ///
    /// Sides that are not multiples of 32 are reflect-padded on the bottom
    /// and right before the pass and the logits are cropped back.
    pub fn final_logits(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        let align = |v: usize| v.div_ceil(32).max(1) * 32;
        let (ph, pw) = (align(s.h()), align(s.w()));
        let padded = if (ph, pw) == (s.h(), s.w()) { images.clone() } else { images.pad_reflect(ph, pw)? };
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let x = ctx.input(padded);
        let out = self.net.forward(&mut ctx, x)?;
        ctx.g.value(out.final_logits).crop(s.h(), s.w())
    }

    /// `sigmoid(final_logits)`.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.final_logits(images)?.map(crate::losses::sigmoid))
    }
}
