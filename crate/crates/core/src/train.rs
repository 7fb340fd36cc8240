//! Full-precision teacher training on the rendered shapes dataset.
//!
//! Plain supervised training: shuffled minibatches, horizontal-flip
//! augmentation, Adam with a cosine schedule, per-epoch validation mAP.
//! This is the only place real training images are consumed; everything
//! downstream works from the frozen teacher alone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{hflip_labels, hflip_u8, Dataset};
use crate::detector::{detect_loss, read_param_grads, BnMode, BoxLabel, DetectLossWeights, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EVAL_CONF, EVAL_NMS_IOU};
use crate::optim::{cosine_lr, Adam};
use crate::rng::{indexed_stream, stream_rng, streams};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { epochs: 24, batch_size: 32, lr: 1e-3, hflip: true, seed: 0 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("teacher.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("teacher.batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("teacher.lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    /// mean training loss over the epoch's batches
    pub loss: f64,
    pub map: f64,
    pub map50: f64,
}

pub struct TeacherOutcome {
    pub metrics: Vec<TeacherEpoch>,
    pub epoch_seconds: Vec<f64>,
}

pub fn teacher_csv(metrics: &[TeacherEpoch]) -> String {
    let mut out = String::from("epoch,loss,map,map50\n");
    for m in metrics {
        out.push_str(&format!("{},{:.9},{:.6},{:.6}\n", m.epoch, m.loss, m.map, m.map50));
    }
    out
}

/// Batch tensor plus labels, with per-image horizontal flips applied.
fn assemble_batch(ds: &Dataset, indices: &[usize], flips: &[bool]) -> (Tensor, Vec<Vec<BoxLabel>>) {
    let size = ds.manifest.image_size;
    let plane = 3 * size * size;
    let mut data = Vec::with_capacity(indices.len() * plane);
    let mut labels = Vec::with_capacity(indices.len());
    for (&i, &flip) in indices.iter().zip(flips) {
        if flip {
            let img = hflip_u8(size, &ds.images[i]);
            data.extend(img.iter().map(|&b| b as f64 / 255.0));
            labels.push(hflip_labels(&ds.labels[i]));
        } else {
            data.extend(ds.images[i].iter().map(|&b| b as f64 / 255.0));
            labels.push(ds.labels[i].clone());
        }
    }
    let t = Tensor::new(vec![indices.len(), 3, size, size], data).expect("batch shape");
    (t, labels)
}

/// Train `model` in place on the dataset's train split, validating on the
/// held-out split after every epoch. Fails with a divergence error if the
/// loss leaves the reals.
pub fn train_teacher(
    model: &mut DetectorModel,
    ds: &Dataset,
    cfg: &TeacherConfig,
    weights: &DetectLossWeights,
) -> Result<TeacherOutcome> {
    cfg.validate()?;
    if model.frozen {
        return Err(Error::invalid("train_teacher", "model is frozen"));
    }
    if ds.manifest.image_size != model.cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, model wants {}px",
            ds.manifest.image_size, model.cfg.image_size
        )));
    }
    if ds.manifest.num_classes != model.cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            ds.manifest.num_classes, model.cfg.num_classes
        )));
    }
    let train_idx = ds.train_indices();
    let val_idx = {
        let v = ds.val_indices();
        if v.is_empty() { train_idx.clone() } else { v }
    };
    if train_idx.is_empty() {
        return Err(Error::invalid("train_teacher", "empty train split"));
    }

    let batches_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut adam = Adam::new();
    let mut step = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = stream_rng(cfg.seed, indexed_stream(streams::TEACHER_TRAIN, epoch as u64));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let flips: Vec<bool> =
                chunk.iter().map(|_| cfg.hflip && rng.gen_bool(0.5)).collect();
            let (images, labels) = assemble_batch(ds, chunk, &flips);
            let lr = cosine_lr(cfg.lr, step, total_steps);
            step += 1;

            let mut tape = Tape::new();
            let x = tape.leaf(&images);
            let fwd = model.forward(&mut tape, x, BnMode::Train)?;
            let dl = detect_loss(&mut tape, fwd.pred, &labels, model.cfg.num_classes, weights)?;
            let loss = tape.value_scalar(dl.total);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "teacher loss became {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            batches += 1;
            tape.backward(dl.total)?;
            let grads = read_param_grads(&tape, &fwd);
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_refs, lr)?;
            drop(params);
            model.update_running_stats(&tape, &fwd);
        }
        let ev = evaluate_model(model, ds, &val_idx, EVAL_CONF, EVAL_NMS_IOU, cfg.batch_size)?;
        metrics.push(TeacherEpoch {
            epoch,
            loss: loss_sum / batches as f64,
            map: ev.map_5095,
            map50: ev.map_50,
        });
        epoch_seconds.push(t0.elapsed().as_secs_f64());
    }
    Ok(TeacherOutcome { metrics, epoch_seconds })
}
