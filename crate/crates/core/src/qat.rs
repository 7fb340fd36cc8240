//! Quantization-aware training of a low-bit student against a frozen
//! full-precision teacher on a synthetic calibration set.
//!
//! The student starts as a copy of the teacher, gets fake-quantize nodes on
//! every conv except the first and last, and trains weights and quantizer
//! parameters jointly with Adam. The objective distills the teacher's
//! prediction map (temperature-scaled KL on class logits and objectness),
//! matches intermediate feature maps (MSE), and keeps the detection loss
//! against the calibration labels.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::{
    detect_loss, read_param_grads, BnMode, DetectLossWeights, DetectorModel, Forward,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EVAL_CONF, EVAL_NMS_IOU};
use crate::optim::{cosine_lr, Adam};
use crate::quant::QuantSpec;
use crate::rng::{indexed_stream, stream_rng, streams};
use crate::tape::{Tape, ValueId};

/// Stage outputs eligible as feature-distillation taps, shallowest first.
pub const FEATURE_TAP_NAMES: [&str; 3] = ["r1", "r2", "r3"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QatConfig {
    pub beta_kl: f64,
    pub beta_feat: f64,
    pub beta_detect: f64,
    /// distillation temperature
    pub tau: f64,
    /// distill objectness through binary KL alongside the class softmax
    pub kd_objectness: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub bits_weight: u32,
    pub bits_act: u32,
    /// learnable offsets on activation quantizers
    pub asymmetric_act: bool,
    pub feature_layers: Vec<String>,
    pub seed: u64,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            beta_kl: 0.1,
            beta_feat: 1.0,
            beta_detect: 0.04,
            tau: 2.0,
            kd_objectness: true,
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            bits_weight: 6,
            bits_act: 6,
            asymmetric_act: true,
            feature_layers: FEATURE_TAP_NAMES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl QatConfig {
    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            bits_weight: self.bits_weight,
            bits_act: self.bits_act,
            asymmetric_act: self.asymmetric_act,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_kl", self.beta_kl),
            ("beta_feat", self.beta_feat),
            ("beta_detect", self.beta_detect),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("qat.{name} must be >= 0, got {v}")));
            }
        }
        if self.beta_kl == 0.0 && self.beta_feat == 0.0 && self.beta_detect == 0.0 {
            return Err(Error::Config("qat: at least one loss weight must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("qat.tau must be > 0, got {}", self.tau)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("qat.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("qat.batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("qat.lr must be > 0, got {}", self.lr)));
        }
        if self.beta_feat > 0.0 && self.feature_layers.is_empty() {
            return Err(Error::Config("qat.feature_layers empty with beta_feat > 0".into()));
        }
        resolve_taps(&self.feature_layers)?;
        Ok(())
    }
}

fn resolve_taps(names: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let idx = FEATURE_TAP_NAMES
            .iter()
            .position(|t| t == n)
            .ok_or_else(|| Error::Config(format!("qat.feature_layers: unknown tap {n:?}")))?;
        if out.contains(&idx) {
            return Err(Error::Config(format!("qat.feature_layers: duplicate tap {n:?}")));
        }
        out.push(idx);
    }
    Ok(out)
}

/// Temperature-scaled distillation between two prediction maps.
///
/// Class channels: per-cell KL(softmax(t/tau) || softmax(s/tau)), averaged
/// over batch and cells. Objectness: binary KL between sigmoid(t/tau) and
/// sigmoid(s/tau), same averaging, skipped when `kd_objectness` is false.
/// Box channels carry raw offsets, not scores, and are excluded. The whole
/// thing is scaled by tau^2 so gradients stay comparable across tau.
pub fn kd_loss(
    tape: &mut Tape,
    teacher_pred: ValueId,
    student_pred: ValueId,
    num_classes: usize,
    tau: f64,
    kd_objectness: bool,
) -> Result<ValueId> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("kd_loss", format!("tau must be > 0, got {tau}")));
    }
    let shape = tape.shape(teacher_pred).to_vec();
    if shape != tape.shape(student_pred) {
        return Err(Error::shape(
            "kd_loss",
            format!("teacher {:?} vs student {:?}", shape, tape.shape(student_pred)),
        ));
    }
    if shape.len() != 4 || shape[1] != 5 + num_classes {
        return Err(Error::shape("kd_loss", format!("want [N,{},G,G], got {shape:?}", 5 + num_classes)));
    }
    let cells = (shape[0] * shape[2] * shape[3]) as f64;

    let t_cls = tape.slice_axis(teacher_pred, 1, 5, num_classes)?;
    let s_cls = tape.slice_axis(student_pred, 1, 5, num_classes)?;
    let t_scaled = tape.mul_scalar(t_cls, 1.0 / tau);
    let s_scaled = tape.mul_scalar(s_cls, 1.0 / tau);
    let p_t = tape.softmax(t_scaled, 1)?;
    let log_p_t = tape.log_softmax(t_scaled, 1)?;
    let log_p_s = tape.log_softmax(s_scaled, 1)?;
    let log_ratio = tape.sub(log_p_t, log_p_s)?;
    let terms = tape.mul(p_t, log_ratio)?;
    let sum = tape.sum_all(terms);
    let mut total = tape.mul_scalar(sum, 1.0 / cells);

    if kd_objectness {
        let t_obj = tape.slice_axis(teacher_pred, 1, 4, 1)?;
        let s_obj = tape.slice_axis(student_pred, 1, 4, 1)?;
        let t_scaled = tape.mul_scalar(t_obj, 1.0 / tau);
        let s_scaled = tape.mul_scalar(s_obj, 1.0 / tau);
        let p = tape.sigmoid(t_scaled);
        // KL(p || q) = BCE(s_logit, p) - BCE(t_logit, p), elementwise
        let ce = tape.bce_with_logits(s_scaled, p)?;
        let h = tape.bce_with_logits(t_scaled, p)?;
        let kl = tape.sub(ce, h)?;
        let obj = tape.mean_all(kl);
        total = tape.add(total, obj)?;
    }
    Ok(tape.mul_scalar(total, tau * tau))
}

/// Mean over batch and taps of the squared distance between feature maps:
/// (1 / (N * L)) * sum over taps of ||f_teacher - f_student||^2.
pub fn feature_loss(
    tape: &mut Tape,
    teacher_feats: &[ValueId],
    student_feats: &[ValueId],
) -> Result<ValueId> {
    if teacher_feats.is_empty() || teacher_feats.len() != student_feats.len() {
        return Err(Error::invalid(
            "feature_loss",
            format!("tap mismatch: {} vs {}", teacher_feats.len(), student_feats.len()),
        ));
    }
    let n = tape.shape(teacher_feats[0])[0];
    let mut total: Option<ValueId> = None;
    for (&t, &s) in teacher_feats.iter().zip(student_feats) {
        if tape.shape(t) != tape.shape(s) {
            return Err(Error::shape(
                "feature_loss",
                format!("tap shapes {:?} vs {:?}", tape.shape(t), tape.shape(s)),
            ));
        }
        let d = tape.sub(t, s)?;
        let sq = tape.mul(d, d)?;
        let ss = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, ss)?,
            None => ss,
        });
    }
    let scale = 1.0 / (n as f64 * teacher_feats.len() as f64);
    Ok(tape.mul_scalar(total.unwrap(), scale))
}

/// Scalar pieces of the QAT objective, already on the tape. Components are
/// unweighted; `total` carries the beta weights. A component is absent when
/// its beta is zero.
pub struct QatLossParts {
    pub total: ValueId,
    pub kd: Option<ValueId>,
    pub feat: Option<ValueId>,
    pub detect: Option<ValueId>,
}

/// beta_kl * KD + beta_feat * feature MSE + beta_detect * detection loss
/// against the calibration labels.
pub fn qat_total_loss(
    tape: &mut Tape,
    teacher_fwd: &Forward,
    student_fwd: &Forward,
    labels: &[Vec<crate::detector::BoxLabel>],
    num_classes: usize,
    tap_indices: &[usize],
    cfg: &QatConfig,
    weights: &DetectLossWeights,
) -> Result<QatLossParts> {
    let mut total = tape.scalar_const(0.0);
    let mut kd = None;
    let mut feat = None;
    let mut detect = None;
    if cfg.beta_kl > 0.0 {
        let v = kd_loss(
            tape,
            teacher_fwd.pred,
            student_fwd.pred,
            num_classes,
            cfg.tau,
            cfg.kd_objectness,
        )?;
        let w = tape.mul_scalar(v, cfg.beta_kl);
        total = tape.add(total, w)?;
        kd = Some(v);
    }
    if cfg.beta_feat > 0.0 {
        let t_taps: Vec<ValueId> = tap_indices.iter().map(|&i| teacher_fwd.taps[i]).collect();
        let s_taps: Vec<ValueId> = tap_indices.iter().map(|&i| student_fwd.taps[i]).collect();
        let v = feature_loss(tape, &t_taps, &s_taps)?;
        let w = tape.mul_scalar(v, cfg.beta_feat);
        total = tape.add(total, w)?;
        feat = Some(v);
    }
    if cfg.beta_detect > 0.0 {
        let dl = detect_loss(tape, student_fwd.pred, labels, num_classes, weights)?;
        let w = tape.mul_scalar(dl.total, cfg.beta_detect);
        total = tape.add(total, w)?;
        detect = Some(dl.total);
    }
    Ok(QatLossParts { total, kd, feat, detect })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// unweighted component averages over the epoch's batches
    pub l_kd: f64,
    pub l_feat: f64,
    pub l_detect: f64,
    /// weighted total average
    pub total: f64,
    pub map: f64,
    pub map50: f64,
}

pub struct QatOutcome {
    /// best-validation-mAP state; last finite state when training diverged
    pub model: DetectorModel,
    pub best_epoch: usize,
    /// row 0 is the pre-training (calibration-only) state
    pub metrics: Vec<EpochMetrics>,
    pub epoch_seconds: Vec<f64>,
    pub diverged: Option<String>,
}

/// Deterministic CSV of the per-epoch log. Wall-clock stays out so reruns
/// are byte-identical.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,l_kd,l_feat,l_detect,total,map,map50\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6}\n",
            m.epoch, m.l_kd, m.l_feat, m.l_detect, m.total, m.map, m.map50
        ));
    }
    out
}

pub fn timing_csv(epoch_seconds: &[f64]) -> String {
    let mut out = String::from("epoch,seconds\n");
    for (i, s) in epoch_seconds.iter().enumerate() {
        out.push_str(&format!("{i},{s:.3}\n"));
    }
    out
}

struct BatchLosses {
    kd: f64,
    feat: f64,
    detect: f64,
    total: f64,
}

fn qat_batch(
    teacher: &DetectorModel,
    student: &mut DetectorModel,
    calib: &Dataset,
    indices: &[usize],
    tap_indices: &[usize],
    cfg: &QatConfig,
    weights: &DetectLossWeights,
    update: Option<(&mut Adam, f64)>,
) -> Result<BatchLosses> {
    let images = calib.batch(indices);
    let labels = calib.batch_labels(indices);
    let mut tape = Tape::new();
    let x = tape.leaf(&images);
    let t_fwd = teacher.forward(&mut tape, x, BnMode::Eval)?;
    let s_fwd = student.forward(&mut tape, x, BnMode::Train)?;
    let parts = qat_total_loss(
        &mut tape,
        &t_fwd,
        &s_fwd,
        &labels,
        teacher.cfg.num_classes,
        tap_indices,
        cfg,
        weights,
    )?;
    let total = tape.value_scalar(parts.total);
    if !total.is_finite() {
        return Err(Error::Diverged(format!("qat loss became {total}")));
    }
    let read = |tape: &Tape, v: Option<ValueId>| v.map_or(0.0, |id| tape.value_scalar(id));
    let losses = BatchLosses {
        kd: read(&tape, parts.kd),
        feat: read(&tape, parts.feat),
        detect: read(&tape, parts.detect),
        total,
    };
    if let Some((adam, lr)) = update {
        tape.backward(parts.total)?;
        let grads = read_param_grads(&tape, &s_fwd);
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params = student.params_mut();
        adam.step(&mut params, &grad_refs, lr)?;
        drop(params);
        student.clamp_quantizer_steps();
        student.update_running_stats(&tape, &s_fwd);
    }
    Ok(losses)
}

/// Train a quantized student from a frozen teacher on a calibration set.
///
/// The student warm-starts from the teacher, calibrates its quantizers on
/// the first batch, and logs a pre-training row (epoch 0) whose mAP is the
/// post-training-quantization accuracy. Validation runs on `val` after
/// every epoch; the returned model is the best-mAP epoch state (earliest
/// epoch wins ties). A non-finite loss aborts training and returns the last
/// completed epoch's state with `diverged` set.
pub fn run_qat(
    teacher: &DetectorModel,
    calib: &Dataset,
    val: &Dataset,
    cfg: &QatConfig,
    weights: &DetectLossWeights,
) -> Result<QatOutcome> {
    cfg.validate()?;
    if !teacher.frozen {
        return Err(Error::invalid("run_qat", "teacher must be frozen"));
    }
    if calib.manifest.num_images == 0 {
        return Err(Error::invalid("run_qat", "calibration set is empty"));
    }
    if calib.manifest.image_size != teacher.cfg.image_size {
        return Err(Error::Config(format!(
            "calibration images are {}px, teacher wants {}px",
            calib.manifest.image_size, teacher.cfg.image_size
        )));
    }
    if calib.manifest.num_classes != teacher.cfg.num_classes {
        return Err(Error::Config(format!(
            "calibration set has {} classes, teacher has {}",
            calib.manifest.num_classes, teacher.cfg.num_classes
        )));
    }
    let tap_indices = resolve_taps(&cfg.feature_layers)?;

    let mut student = teacher.clone();
    student.set_frozen(false);
    student.attach_quantizers(cfg.quant_spec())?;
    let all: Vec<usize> = (0..calib.manifest.num_images).collect();
    let first: Vec<usize> = all[..cfg.batch_size.min(all.len())].to_vec();
    student.calibrate_activations(&calib.batch(&first))?;

    let val_idx = {
        let held_out = val.val_indices();
        if held_out.is_empty() { (0..val.manifest.num_images).collect() } else { held_out }
    };

    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs + 1);
    let mut diverged = None;

    // pre-training pass: losses without updates, then PTQ accuracy
    let t0 = Instant::now();
    let mut sums = [0.0f64; 4];
    let mut batches = 0usize;
    for chunk in all.chunks(cfg.batch_size) {
        match qat_batch(teacher, &mut student, calib, chunk, &tap_indices, cfg, weights, None) {
            Ok(l) => {
                sums[0] += l.kd;
                sums[1] += l.feat;
                sums[2] += l.detect;
                sums[3] += l.total;
                batches += 1;
            }
            Err(Error::Diverged(msg)) => {
                diverged = Some(format!("pre-training pass: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let ev = evaluate_model(&student, val, &val_idx, EVAL_CONF, EVAL_NMS_IOU, cfg.batch_size)?;
    let b = batches as f64;
    metrics.push(EpochMetrics {
        epoch: 0,
        l_kd: sums[0] / b,
        l_feat: sums[1] / b,
        l_detect: sums[2] / b,
        total: sums[3] / b,
        map: ev.map_5095,
        map50: ev.map_50,
    });
    epoch_seconds.push(t0.elapsed().as_secs_f64());

    let mut best_state = student.clone();
    let mut best_epoch = 0usize;
    let mut best_map = ev.map_5095;
    let mut last_good = student.clone();

    let batches_per_epoch = all.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut adam = Adam::new();
    let mut step = 0u64;
    'epochs: for epoch in 1..=cfg.epochs {
        if diverged.is_some() {
            break;
        }
        let t0 = Instant::now();
        let mut order = all.clone();
        let mut rng = stream_rng(cfg.seed, indexed_stream(streams::QAT_TRAIN, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.lr, step, total_steps);
            step += 1;
            match qat_batch(
                teacher,
                &mut student,
                calib,
                chunk,
                &tap_indices,
                cfg,
                weights,
                Some((&mut adam, lr)),
            ) {
                Ok(l) => {
                    sums[0] += l.kd;
                    sums[1] += l.feat;
                    sums[2] += l.detect;
                    sums[3] += l.total;
                    batches += 1;
                }
                Err(Error::Diverged(msg)) => {
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let ev = evaluate_model(&student, val, &val_idx, EVAL_CONF, EVAL_NMS_IOU, cfg.batch_size)?;
        let b = batches as f64;
        metrics.push(EpochMetrics {
            epoch,
            l_kd: sums[0] / b,
            l_feat: sums[1] / b,
            l_detect: sums[2] / b,
            total: sums[3] / b,
            map: ev.map_5095,
            map50: ev.map_50,
        });
        epoch_seconds.push(t0.elapsed().as_secs_f64());
        last_good = student.clone();
        if ev.map_5095 > best_map {
            best_map = ev.map_5095;
            best_epoch = epoch;
            best_state = student.clone();
        }
    }

    let model = if diverged.is_some() { last_good } else { best_state };
    let best_epoch = if diverged.is_some() { metrics.len() - 1 } else { best_epoch };
    Ok(QatOutcome { model, best_epoch, metrics, epoch_seconds, diverged })
}
