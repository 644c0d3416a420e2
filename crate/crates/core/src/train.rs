//! Optimisation loop, inference and prediction export.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{epoch_plan, make_batch, make_edge_ground_truth, save_gray, save_rgb, Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::optim::{clip_grad_norm, AdamW};
use crate::tensor::Tensor;

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub step: u64,
    pub epoch: u64,
    /// Position of the batch within its epoch.
    pub batch: usize,
    pub scale: f64,
    pub side: usize,
    pub ids: Vec<String>,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,epoch,batch,scale,side,l_edge,l_t_f1,l_t_f2,l_t_f3,l_t_f4,l_t_p,total,grad_norm";

    /// Values use the shortest exact decimal form, so equal logs mean equal
    /// numbers.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.batch,
            self.scale,
            self.side,
            l.l_edge,
            l.l_t_f[0],
            l.l_t_f[1],
            l.l_t_f[2],
            l.l_t_f[3],
            l.l_t_p,
            l.total,
            self.grad_norm
        )
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.train.seed)?;
        let optimizer = AdamW::new(config.optimizer())?;
        Ok(Trainer { config, model, optimizer, step: 0, epoch: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.restore_model()?;
        let optimizer = ck.restore_optimizer(&model.store)?;
        Ok(Trainer { config: ck.config.clone(), model, optimizer, step: ck.step, epoch: ck.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, &self.optimizer, self.step, self.epoch)
    }

    /// Loss, gradients and one AdamW update on `batch`.
    pub fn train_step(&mut self, batch: &Batch, batch_index: usize, scale: f64) -> Result<StepRecord> {
        let (loss, mut grads, bn_updates) = {
            let mut ctx = Ctx::new(&self.model.store, Mode::Train);
            let x = ctx.input(batch.images.clone());
            let out = self.model.net.forward(&mut ctx, x)?;
            let terms = total_loss(&mut ctx.g, &out.supervised(), &batch.masks, &batch.edges)?;
            let loss = terms.breakdown(&ctx.g);
            if !loss.is_finite() {
                return Err(self.non_finite(batch, batch_index, format!("loss terms {loss:?}")));
            }
            let mut g = ctx.g.backward(terms.total)?;
            let grads = ctx.param_grads(&mut g);
            (loss, grads, ctx.take_bn_updates())
        };
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            let name = self.model.store.name(*id).to_string();
            return Err(self.non_finite(batch, batch_index, format!("gradient of `{name}`")));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.train.grad_clip_norm);
        self.optimizer.step(&mut self.model.store, &grads)?;
        self.model.store.apply_bn_updates(&bn_updates);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch,
            batch: batch_index,
            scale,
            side: batch.images.shape().h(),
            ids: batch.ids.clone(),
            loss,
            grad_norm,
        })
    }

    fn non_finite(&self, batch: &Batch, batch_index: usize, detail: String) -> Error {
        log::error!("non-finite value at step {} batch {batch_index} ids {:?}: {detail}", self.step + 1, batch.ids);
        Error::NonFiniteLoss { step: self.step + 1, batch_id: batch_index, ids: batch.ids.clone(), detail }
    }

    fn done(&self) -> bool {
        let t = &self.config.train;
        (t.max_steps > 0 && self.step >= t.max_steps) || (t.epochs > 0 && self.epoch >= t.epochs)
    }

    /// Trains until `epochs` or `max_steps` is reached, whichever comes
    /// first; `observer` sees every step.
    pub fn run(&mut self, split: &DatasetSplit, observer: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        if split.is_empty() {
            return Err(Error::Dataset(format!("training split `{}` is empty", split.name)));
        }
        let t = self.config.train.clone();
        while !self.done() {
            let plan = epoch_plan(t.seed, self.epoch, split.len(), t.batch_size, &t.scales)?;
            for (i, pb) in plan.iter().enumerate() {
                let batch = make_batch(split, &pb.indices, pb.scale, t.base_size)?;
                let rec = self.train_step(&batch, i, pb.scale)?;
                observer(&rec);
                if t.max_steps > 0 && self.step >= t.max_steps {
                    return Ok(());
                }
            }
            self.epoch += 1;
        }
        Ok(())
    }
}

/// Trains a fresh model on `split` and returns its final checkpoint.
pub fn train(config: &TrainConfig, split: &DatasetSplit, observer: &mut dyn FnMut(&StepRecord)) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run(split, observer)?;
    Ok(trainer.checkpoint())
}

/// Inference outputs for one image, all `1 x H x W x C`.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub prob: Tensor,
    pub mask: Tensor,
    /// The input with the predicted boundary drawn in green.
    pub overlay: Tensor,
}

pub fn predict(model: &Model, image: &Tensor, threshold: f64) -> Result<Prediction> {
    if image.shape().n() != 1 {
        return Err(Error::shape(format!("predict takes one image, got {:?}", image.shape())));
    }
    let prob = model.predict_proba(image)?;
    let mask = prob.map(|p| if p >= threshold { 1.0 } else { 0.0 });
    let overlay = draw_boundary(image, &mask);
    Ok(Prediction { prob, mask, overlay })
}

fn draw_boundary(image: &Tensor, mask: &Tensor) -> Tensor {
    let edge = make_edge_ground_truth(mask);
    let s = image.shape();
    Tensor::from_fn(s, |n, y, x, c| {
        if edge.at(n, y, x, 0) > 0.5 {
            [0.0, 1.0, 0.0][c]
        } else {
            image.at(n, y, x, c)
        }
    })
}

/// Writes `<stem>_prob.png`, `<stem>_mask.png` and `<stem>_overlay.png`.
pub fn write_prediction(pred: &Prediction, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let paths: Vec<PathBuf> =
        ["prob", "mask", "overlay"].iter().map(|k| out_dir.join(format!("{stem}_{k}.png"))).collect();
    save_gray(&paths[0], &pred.prob, 255.0)?;
    save_gray(&paths[1], &pred.mask, 255.0)?;
    save_rgb(&paths[2], &pred.overlay)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic;
    use crate::tensor::Shape;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig { width: 8, backbone_channels: [4, 8, 8, 16], sam_groups: 2, ..ModelConfig::default() };
        cfg.train.base_size = 64;
        cfg.train.scales = vec![1.0];
        cfg.train.batch_size = 3;
        cfg.train.epochs = 1;
        cfg.train.learning_rate = 1e-3;
        cfg
    }

    #[test]
    fn one_epoch_counts_ceil_batches() {
        let split = synthetic::split("t", 4, 64, 1).unwrap();
        let mut steps = Vec::new();
        let ck = train(&tiny_config(), &split, &mut |r| steps.push(r.step)).unwrap();
        assert_eq!(ck.step, 2);
        assert_eq!(ck.epoch, 1);
        assert_eq!(steps, vec![1, 2]);
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let split = synthetic::split("t", 4, 64, 1).unwrap();
        let mut cfg = tiny_config();
        cfg.train.max_steps = 1;
        cfg.train.epochs = 0;
        let ck = train(&cfg, &split, &mut |_| {}).unwrap();
        assert_eq!((ck.step, ck.epoch), (1, 0));
    }

    #[test]
    fn non_finite_input_aborts_with_batch_ids() {
        let split = synthetic::split("t", 2, 64, 1).unwrap();
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let mut batch = make_batch(&split, &[0, 1], 1.0, 64).unwrap();
        batch.images.data_mut()[0] = f64::NAN;
        match trainer.train_step(&batch, 0, 1.0) {
            Err(e @ Error::NonFiniteLoss { .. }) => {
                assert!(e.is_numerical());
                assert!(e.to_string().contains("synth000"));
            }
            other => panic!("expected a numerical failure, got {other:?}", other = other.map(|r| r.step)),
        }
        assert_eq!(trainer.step, 0);
    }

    #[test]
    fn unaligned_prediction_is_cropped_back() {
        let model = Model::new(&tiny_config().model, 0).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 50, 70, 3), |_, y, x, c| ((y + 2 * x + c) % 9) as f64 / 9.0);
        let pred = predict(&model, &img, 0.5).unwrap();
        assert_eq!(pred.prob.shape(), Shape::new(1, 50, 70, 1));
        assert_eq!(pred.overlay.shape(), img.shape());
    }

    #[test]
    fn aligned_input_is_not_padded() {
        let model = Model::new(&tiny_config().model, 0).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 64, 64, 3), |_, y, x, c| ((y * x + c) % 7) as f64 / 7.0);
        let direct = {
            let mut ctx = Ctx::new(&model.store, Mode::Eval);
            let x = ctx.input(img.clone());
            let out = model.net.forward(&mut ctx, x).unwrap();
            ctx.g.value(out.final_logits).clone()
        };
        assert!(model.final_logits(&img).unwrap().max_abs_diff(&direct) < 1e-12);
    }
}
