//! Separated edge-guidance segmentation network for colonoscopy polyps.
//!
//! The crate is self-contained: tensors are `f64` NHWC arrays, and a small
//! tape-based autodiff ([`autograd`]) differentiates every layer, which keeps
//! gradient checks exact enough to run at `1e-4` relative tolerance.
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | dataset loading, Canny edge ground truth, batches |
//! | [`encoder`] | backbone contract and the toy backbone |
//! | [`cfp`] | multi-dilation refinement of each level |
//! | [`eem`] | edge feature and edge map |
//! | [`seg`] | separator, edge guidance, channel and shuffle attention |
//! | [`cfm`] | cascade fusion and the inference map |
//! | [`losses`] | weighted BCE / IoU, edge loss, total objective |
//! | [`metrics`] | Dice, IoU, MAE and split reports |
//! | [`train`] | AdamW loop, prediction export |
//! | [`checkpoint`] | versioned archive |
//!
//! ```
//! use segt::model::{Model, ModelConfig};
//! use segt::tensor::{Shape, Tensor};
//!
//! let cfg = ModelConfig { width: 8, backbone_channels: [4, 8, 8, 16], sam_groups: 2, ..Default::default() };
//! let model = Model::new(&cfg, 0).unwrap();
//! let prob = model.predict_proba(&Tensor::full(Shape::new(1, 64, 64, 3), 0.5)).unwrap();
//! assert_eq!(prob.shape(), Shape::new(1, 64, 64, 1));
//! ```

pub mod autograd;
pub mod cfm;
pub mod cfp;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod eem;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seg;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// The book's listings run as doctests so they cannot drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/edges.md")]
    mod edges {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
