//! Single-scale anchor-free grid detector. The backbone is a stem plus
//! three stride-2 stages (conv/BN/SiLU throughout); a 1x1 head maps the
//! final feature map to [N, 5+C, G, G] where G = image_size / 8. Channel
//! layout per cell: tx, ty, tw, th, objectness, then C class logits.
//!
//! Box parameterization, relative to a cell at (gx, gy):
//!   cx = (sigmoid(tx) + gx) / G      w = sigmoid(tw)^2
//! so every (cx, w) in the open unit interval has a unique preimage,
//! which the calibration synthesizer relies on when it plants labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantSpec, QuantizerParams};
use crate::rng::{stream_rng, streams};
use crate::tape::{sigmoid, Tape, ValueId};
use crate::tensor::{randn_scalar, Tensor};

pub const OBJ_CHANNEL: usize = 4;
pub const CLASS_CHANNEL: usize = 5;
/// backbone downsampling factor
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// stem plus three stage widths
    pub channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 6,
            channels: vec![8, 16, 24, 32],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size / STRIDE
    }

    pub fn pred_channels(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Config(format!(
                "model.channels wants 4 widths (stem + 3 stages), got {}",
                self.channels.len()
            )));
        }
        if self.image_size % STRIDE != 0 || self.image_size < 2 * STRIDE {
            return Err(Error::Config(format!(
                "model.image_size {} must be a multiple of {STRIDE} and at least {}",
                self.image_size,
                2 * STRIDE
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be positive".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("model.channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![c], 1.0).with_grad(),
            beta: Tensor::zeros(vec![c]).with_grad(),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub name: &'static str,
    pub w: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNorm>,
    pub stride: usize,
    pub pad: usize,
    pub silu: bool,
}

/// Per-layer quantizer pair for one quantizable conv.
#[derive(Clone, Debug)]
pub struct LayerQuant {
    pub block: usize,
    pub weight: QuantizerParams,
    pub act: QuantizerParams,
}

#[derive(Clone, Debug)]
pub struct ModelQuant {
    pub spec: QuantSpec,
    pub layers: Vec<LayerQuant>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub cfg: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    pub quant: Option<ModelQuant>,
    /// frozen models register their parameters as constants; no gradient
    /// memory is spent on them
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// normalize by batch stats; caller should then fold them into the
    /// running stats via `update_running_stats`
    Train,
    /// normalize by running stats
    Eval,
    /// normalize by running stats like Eval, but additionally expose
    /// differentiable per-channel batch moments of each BN input for
    /// statistic-matching losses; mutates nothing
    Measure,
}

/// Everything a forward pass exposes besides the prediction map.
pub struct Forward {
    pub pred: ValueId,
    /// post-activation output of each stage, shallowest first
    pub taps: Vec<ValueId>,
    /// Train mode: (block index, bn node) pairs for running-stat updates
    bn_nodes: Vec<(usize, ValueId)>,
    /// Measure mode: (block index, [2C] batch mean|var of the BN input)
    pub stat_taps: Vec<(usize, ValueId)>,
    /// leaf ids aligned with `DetectorModel::params_mut` order
    pub param_ids: Vec<ValueId>,
    /// quantizable-layer input activations, recorded when quantizers are
    /// attached (even bypassed); feeds activation-range calibration
    act_inputs: Vec<(usize, ValueId)>,
}

impl DetectorModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, streams::TEACHER_INIT);
        let c = &cfg.channels;
        let mut blocks = Vec::new();
        let mut push = |name, cin: usize, cout: usize, k: usize, stride, rng: &mut _| {
            // Kaiming fan-in keeps pre-BN variance near 1
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let n = cout * cin * k * k;
            let data: Vec<f64> = (0..n).map(|_| randn_scalar(rng) * std).collect();
            blocks.push(ConvBlock {
                name,
                w: Tensor::new(vec![cout, cin, k, k], data).expect("sized above").with_grad(),
                bias: None,
                bn: Some(BatchNorm::new(cout)),
                stride,
                pad: k / 2,
                silu: true,
            });
        };
        push("stem", 3, c[0], 3, 1, &mut rng);
        push("d1", c[0], c[1], 3, 2, &mut rng);
        push("r1", c[1], c[1], 3, 1, &mut rng);
        push("d2", c[1], c[2], 3, 2, &mut rng);
        push("r2", c[2], c[2], 3, 1, &mut rng);
        push("d3", c[2], c[3], 3, 2, &mut rng);
        push("r3", c[3], c[3], 3, 1, &mut rng);
        let pc = cfg.pred_channels();
        let head_std = 0.01;
        let head_n = pc * c[3];
        let head_w: Vec<f64> = (0..head_n).map(|_| randn_scalar(&mut rng) * head_std).collect();
        // objectness starts pessimistic so early confidence maps are sparse
        let mut head_b = vec![0.0; pc];
        head_b[OBJ_CHANNEL] = -2.0;
        blocks.push(ConvBlock {
            name: "head",
            w: Tensor::new(vec![pc, c[3], 1, 1], head_w)?.with_grad(),
            bias: Some(Tensor::new(vec![pc], head_b)?.with_grad()),
            bn: None,
            stride: 1,
            pad: 0,
            silu: false,
        });
        Ok(DetectorModel { cfg, blocks, quant: None, frozen: false })
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Indices of quantizable blocks: every conv except the first and the
    /// last.
    pub fn quantizable_blocks(&self) -> Vec<usize> {
        (1..self.blocks.len() - 1).collect()
    }

    /// Attach fresh quantizers. Weight steps initialize immediately from
    /// the weights; activation steps wait for `calibrate_activations`.
    pub fn attach_quantizers(&mut self, spec: QuantSpec) -> Result<()> {
        let mut layers = Vec::new();
        for block in self.quantizable_blocks() {
            let mut weight = QuantizerParams::new(spec.bits_weight, QuantKind::Weight, false)?;
            weight.init_from_samples(self.blocks[block].w.data());
            let act = QuantizerParams::new(spec.bits_act, QuantKind::Activation, spec.asymmetric_act)?;
            layers.push(LayerQuant { block, weight, act });
        }
        self.quant = Some(ModelQuant { spec, layers });
        Ok(())
    }

    /// Initialize activation quantizer ranges from one reference batch,
    /// observed with quantizers bypassed.
    pub fn calibrate_activations(&mut self, images: &Tensor) -> Result<()> {
        if self.quant.is_none() {
            return Err(Error::invalid("calibrate", "no quantizers attached"));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(images);
        let fwd = self.forward_impl(&mut tape, x, BnMode::Eval, true)?;
        let samples: Vec<(usize, Vec<f64>)> = fwd
            .act_inputs
            .iter()
            .map(|&(li, id)| (li, tape.value(id).to_vec()))
            .collect();
        let quant = self.quant.as_mut().expect("checked above");
        for (li, vals) in samples {
            quant.layers[li].act.init_from_samples(&vals);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, images: ValueId, mode: BnMode) -> Result<Forward> {
        self.forward_impl(tape, images, mode, false)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        images: ValueId,
        mode: BnMode,
        bypass_quant: bool,
    ) -> Result<Forward> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.cfg.image_size || shape[3] != self.cfg.image_size
        {
            return Err(Error::shape(
                "detector_forward",
                format!("want [N,3,{0},{0}], got {1:?}", self.cfg.image_size, shape),
            ));
        }
        let mut param_ids = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut stat_taps = Vec::new();
        let mut taps = Vec::new();
        let mut act_inputs = Vec::new();

        let register = |tape: &mut Tape, t: &Tensor, frozen: bool| -> ValueId {
            if frozen {
                let mut c = t.clone();
                c.requires_grad = false;
                tape.leaf(&c)
            } else {
                tape.leaf(t)
            }
        };

        let quant_for = |bi: usize| -> Option<(usize, &LayerQuant)> {
            self.quant
                .as_ref()
                .and_then(|q| q.layers.iter().enumerate().find(|(_, l)| l.block == bi))
        };

        let mut x = images;
        for (bi, block) in self.blocks.iter().enumerate() {
            let lq = quant_for(bi);
            if let Some((li, lq)) = lq {
                act_inputs.push((li, x));
                if !bypass_quant {
                    if !lq.act.initialized {
                        return Err(Error::invalid(
                            "detector_forward",
                            format!("activation quantizer {li} not calibrated"),
                        ));
                    }
                    let node = lq.act.apply(tape, x)?;
                    param_ids.push(node.step_id);
                    if let Some(off) = node.offset_id {
                        param_ids.push(off);
                    }
                    x = node.out;
                }
            }
            let mut w = register(tape, &block.w, self.frozen);
            param_ids.push(w);
            if let Some((_, lq)) = lq {
                if !bypass_quant {
                    let node = lq.weight.apply(tape, w)?;
                    param_ids.push(node.step_id);
                    w = node.out;
                }
            }
            let bias = block.bias.as_ref().map(|b| {
                let id = register(tape, b, self.frozen);
                param_ids.push(id);
                id
            });
            x = tape.conv2d(x, w, bias, block.stride, block.pad)?;
            if let Some(bn) = &block.bn {
                let gamma = register(tape, &bn.gamma, self.frozen);
                let beta = register(tape, &bn.beta, self.frozen);
                param_ids.push(gamma);
                param_ids.push(beta);
                let y = match mode {
                    BnMode::Train => {
                        let y = tape.batchnorm_train(x, gamma, beta, self.cfg.bn_eps)?;
                        bn_nodes.push((bi, y));
                        y
                    }
                    BnMode::Eval => tape.batchnorm_eval(
                        x,
                        gamma,
                        beta,
                        &bn.running_mean,
                        &bn.running_var,
                        self.cfg.bn_eps,
                    )?,
                    BnMode::Measure => {
                        let stats = tape.channel_stats(x)?;
                        stat_taps.push((bi, stats));
                        tape.batchnorm_eval(
                            x,
                            gamma,
                            beta,
                            &bn.running_mean,
                            &bn.running_var,
                            self.cfg.bn_eps,
                        )?
                    }
                };
                x = y;
            }
            if block.silu {
                x = tape.silu(x);
            }
            if matches!(block.name, "r1" | "r2" | "r3") {
                taps.push(x);
            }
        }
        Ok(Forward { pred: x, taps, bn_nodes, stat_taps, param_ids, act_inputs })
    }

    /// Fold tape batch statistics into the running statistics; call after
    /// each Train-mode forward. Variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, tape: &Tape, fwd: &Forward) {
        let mom = self.cfg.bn_momentum;
        for &(bi, node) in &fwd.bn_nodes {
            let count: usize = {
                let s = tape.shape(node);
                s[0] * s[2] * s[3]
            };
            let correction = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
            let (mean, var) = tape.bn_batch_stats(node).expect("train-mode bn node");
            // running stats are owned plain vectors so no tape aliasing
            let (mean, var) = (mean.to_vec(), var.to_vec());
            let bn = self.blocks[bi].bn.as_mut().expect("bn_nodes only lists bn blocks");
            for c in 0..mean.len() {
                bn.running_mean[c] = (1.0 - mom) * bn.running_mean[c] + mom * mean[c];
                bn.running_var[c] = (1.0 - mom) * bn.running_var[c] + mom * var[c] * correction;
            }
        }
    }

    /// Mutable views of every trainable parameter, in the exact order
    /// `Forward::param_ids` registers them.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let quant_blocks: Vec<Option<usize>> = (0..self.blocks.len())
            .map(|bi| {
                self.quant
                    .as_ref()
                    .and_then(|q| q.layers.iter().position(|l| l.block == bi))
            })
            .collect();
        // split borrows: pull quant layers out as raw pointers is not
        // needed; iterate blocks and quant in lockstep instead
        let mut out: Vec<&mut Tensor> = Vec::new();
        let quant = &mut self.quant;
        let blocks = &mut self.blocks;
        // Safety-free approach: collect per-block mutable refs in order by
        // walking the two structures with indices known disjoint.
        let mut layer_refs: Vec<Option<(&mut QuantizerParams, &mut QuantizerParams)>> =
            Vec::with_capacity(blocks.len());
        if let Some(q) = quant.as_mut() {
            let mut iters: Vec<Option<&mut LayerQuant>> = Vec::with_capacity(blocks.len());
            let mut rest: &mut [LayerQuant] = &mut q.layers;
            for bi in 0..blocks.len() {
                if quant_blocks[bi].is_some() {
                    let (head, tail) = rest.split_first_mut().expect("layers align with blocks");
                    iters.push(Some(head));
                    rest = tail;
                } else {
                    iters.push(None);
                }
            }
            for it in iters {
                layer_refs.push(it.map(|l| (&mut l.weight, &mut l.act)));
            }
        } else {
            layer_refs.resize_with(blocks.len(), || None);
        }
        for (block, lr) in blocks.iter_mut().zip(layer_refs) {
            if let Some((wq, aq)) = lr {
                out.push(&mut aq.step);
                if let Some(off) = aq.offset.as_mut() {
                    out.push(off);
                }
                out.push(&mut block.w);
                out.push(&mut wq.step);
            } else {
                out.push(&mut block.w);
            }
            if let Some(b) = block.bias.as_mut() {
                out.push(b);
            }
            if let Some(bn) = block.bn.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Keep quantizer steps strictly positive after optimizer updates.
    pub fn clamp_quantizer_steps(&mut self) {
        if let Some(q) = self.quant.as_mut() {
            for l in q.layers.iter_mut() {
                l.weight.clamp_step();
                l.act.clamp_step();
            }
        }
    }
}

/// One ground-truth or detected box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// detector score for detections; 1.0 for ground truth
    pub confidence: f64,
}

impl BoxLabel {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

pub fn iou(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let ax1 = a.cx - a.w / 2.0;
    let ay1 = a.cy - a.h / 2.0;
    let ax2 = a.cx + a.w / 2.0;
    let ay2 = a.cy + a.h / 2.0;
    let bx1 = b.cx - b.w / 2.0;
    let by1 = b.cy - b.h / 2.0;
    let bx2 = b.cx + b.w / 2.0;
    let by2 = b.cy + b.h / 2.0;
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy class-agnostic suppression: keep the highest-scoring box, drop
/// everything overlapping it above `iou_thresh`, repeat.
pub fn nms(mut dets: Vec<BoxLabel>, iou_thresh: f64) -> Vec<BoxLabel> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut keep: Vec<BoxLabel> = Vec::new();
    'outer: for d in dets {
        for k in &keep {
            if iou(&d, k) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

/// Grid cell of a box center. Centers exactly on the far edge clamp into
/// the last cell.
pub fn cell_of(cx: f64, cy: f64, grid: usize) -> (usize, usize) {
    let gx = ((cx * grid as f64).floor() as isize).clamp(0, grid as isize - 1) as usize;
    let gy = ((cy * grid as f64).floor() as isize).clamp(0, grid as isize - 1) as usize;
    (gx, gy)
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Head activations that decode back to the given box at its cell.
/// Returns (gx, gy, tx, ty, tw, th).
pub fn encode_box(label: &BoxLabel, grid: usize) -> (usize, usize, f64, f64, f64, f64) {
    let (gx, gy) = cell_of(label.cx, label.cy, grid);
    let tx = logit(label.cx * grid as f64 - gx as f64);
    let ty = logit(label.cy * grid as f64 - gy as f64);
    let tw = logit(label.w.max(0.0).sqrt());
    let th = logit(label.h.max(0.0).sqrt());
    (gx, gy, tx, ty, tw, th)
}

/// Threshold and decode a prediction map, then suppress duplicates.
/// Scores are sigmoid(obj) * max_class sigmoid(cls).
pub fn decode_predictions(
    pred: &Tensor,
    num_classes: usize,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<BoxLabel>>> {
    let s = pred.shape();
    if s.len() != 4 || s[1] != 5 + num_classes || s[2] != s[3] {
        return Err(Error::shape(
            "decode_predictions",
            format!("want [N,{},G,G], got {:?}", 5 + num_classes, s),
        ));
    }
    let (n, ch, g) = (s[0], s[1], s[2]);
    let d = pred.data();
    let at = |ni: usize, c: usize, gy: usize, gx: usize| d[((ni * ch + c) * g + gy) * g + gx];
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut dets = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let obj = sigmoid(at(ni, OBJ_CHANNEL, gy, gx));
                let mut best_c = 0;
                let mut best_p = f64::NEG_INFINITY;
                for c in 0..num_classes {
                    let p = at(ni, CLASS_CHANNEL + c, gy, gx);
                    if p > best_p {
                        best_p = p;
                        best_c = c;
                    }
                }
                let score = obj * sigmoid(best_p);
                if score < conf_thresh {
                    continue;
                }
                let sx = sigmoid(at(ni, 0, gy, gx));
                let sy = sigmoid(at(ni, 1, gy, gx));
                let sw = sigmoid(at(ni, 2, gy, gx));
                let sh = sigmoid(at(ni, 3, gy, gx));
                dets.push(BoxLabel {
                    class_id: best_c,
                    cx: (gx as f64 + sx) / g as f64,
                    cy: (gy as f64 + sy) / g as f64,
                    w: sw * sw,
                    h: sh * sh,
                    confidence: score,
                });
            }
        }
        out.push(nms(dets, nms_iou));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectLossWeights {
    pub box_weight: f64,
    pub conf_weight: f64,
    pub cls_weight: f64,
}

impl Default for DetectLossWeights {
    fn default() -> Self {
        DetectLossWeights { box_weight: 0.05, conf_weight: 1.0, cls_weight: 0.5 }
    }
}

pub struct DetectLoss {
    pub total: ValueId,
    pub box_loss: ValueId,
    pub conf_loss: ValueId,
    pub cls_loss: ValueId,
    /// number of assigned cells
    pub matched: usize,
}

/// Resolve labels to grid cells, one label per cell: ties go to the larger
/// box, then the smaller class id. Returns (gy, gx, label) sorted by cell.
pub fn assign_cells(labels: &[BoxLabel], grid: usize) -> Vec<(usize, usize, BoxLabel)> {
    let mut by_cell: std::collections::BTreeMap<(usize, usize), BoxLabel> =
        std::collections::BTreeMap::new();
    for l in labels {
        let (gx, gy) = cell_of(l.cx, l.cy, grid);
        match by_cell.get(&(gy, gx)) {
            Some(prev)
                if prev.area() > l.area()
                    || (prev.area() == l.area() && prev.class_id <= l.class_id) => {}
            _ => {
                by_cell.insert((gy, gx), *l);
            }
        }
    }
    by_cell.into_iter().map(|((gy, gx), l)| (gy, gx, l)).collect()
}

/// Detection loss on a prediction map:
///   total = box_weight * mean(1 - IoU)        over assigned cells
///         + conf_weight * mean(BCE(obj))      over all cells
///         + cls_weight * mean(BCE(cls))       over assigned cells
/// Batches with no labels contribute only the confidence term.
pub fn detect_loss(
    tape: &mut Tape,
    pred: ValueId,
    batch_labels: &[Vec<BoxLabel>],
    num_classes: usize,
    weights: &DetectLossWeights,
) -> Result<DetectLoss> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 4 || shape[1] != 5 + num_classes || shape[2] != shape[3] {
        return Err(Error::shape(
            "detect_loss",
            format!("want [N,{},G,G], got {:?}", 5 + num_classes, shape),
        ));
    }
    if shape[0] != batch_labels.len() {
        return Err(Error::shape(
            "detect_loss",
            format!("{} label lists for batch of {}", batch_labels.len(), shape[0]),
        ));
    }
    let (n, g) = (shape[0], shape[2]);

    let mut cells: Vec<(u32, u32, u32)> = Vec::new();
    let mut assigned: Vec<BoxLabel> = Vec::new();
    let mut gx_c: Vec<f64> = Vec::new();
    let mut gy_c: Vec<f64> = Vec::new();
    let mut obj_target = vec![0.0; n * g * g];
    for (ni, labels) in batch_labels.iter().enumerate() {
        for (gy, gx, label) in assign_cells(labels, g) {
            cells.push((ni as u32, gy as u32, gx as u32));
            gx_c.push(gx as f64);
            gy_c.push(gy as f64);
            assigned.push(label);
            obj_target[(ni * g + gy) * g + gx] = 1.0;
        }
    }
    let m = cells.len();

    // confidence over every cell
    let obj_logits = tape.slice_axis(pred, 1, OBJ_CHANNEL, 1)?;
    let obj_t = tape.constant(vec![n, 1, g, g], obj_target)?;
    let obj_bce = tape.bce_with_logits(obj_logits, obj_t)?;
    let conf_loss = tape.mean_all(obj_bce);

    let (box_loss, cls_loss) = if m == 0 {
        (tape.scalar_const(0.0), tape.scalar_const(0.0))
    } else {
        let gathered = tape.gather_cells(pred, &cells)?;
        let col = |tape: &mut Tape, c: usize| tape.slice_axis(gathered, 1, c, 1);

        // decode the predicted boxes differentiably
        let tx = col(tape, 0)?;
        let ty = col(tape, 1)?;
        let tw = col(tape, 2)?;
        let th = col(tape, 3)?;
        let sx = tape.sigmoid(tx);
        let sy = tape.sigmoid(ty);
        let swr = tape.sigmoid(tw);
        let shr = tape.sigmoid(th);
        let gxc = tape.constant(vec![m, 1], gx_c)?;
        let gyc = tape.constant(vec![m, 1], gy_c)?;
        let cx_num = tape.add(sx, gxc)?;
        let cx = tape.mul_scalar(cx_num, 1.0 / g as f64);
        let cy_num = tape.add(sy, gyc)?;
        let cy = tape.mul_scalar(cy_num, 1.0 / g as f64);
        let w = tape.mul(swr, swr)?;
        let h = tape.mul(shr, shr)?;

        let half_w = tape.mul_scalar(w, 0.5);
        let half_h = tape.mul_scalar(h, 0.5);
        let x1 = tape.sub(cx, half_w)?;
        let x2 = tape.add(cx, half_w)?;
        let y1 = tape.sub(cy, half_h)?;
        let y2 = tape.add(cy, half_h)?;

        let lx1: Vec<f64> = assigned.iter().map(|l| l.cx - l.w / 2.0).collect();
        let lx2: Vec<f64> = assigned.iter().map(|l| l.cx + l.w / 2.0).collect();
        let ly1: Vec<f64> = assigned.iter().map(|l| l.cy - l.h / 2.0).collect();
        let ly2: Vec<f64> = assigned.iter().map(|l| l.cy + l.h / 2.0).collect();
        let larea: Vec<f64> = assigned.iter().map(|l| l.area()).collect();
        let lx1 = tape.constant(vec![m, 1], lx1)?;
        let lx2 = tape.constant(vec![m, 1], lx2)?;
        let ly1 = tape.constant(vec![m, 1], ly1)?;
        let ly2 = tape.constant(vec![m, 1], ly2)?;
        let larea = tape.constant(vec![m, 1], larea)?;

        let ix1 = tape.max_elem(x1, lx1)?;
        let ix2 = tape.min_elem(x2, lx2)?;
        let iy1 = tape.max_elem(y1, ly1)?;
        let iy2 = tape.min_elem(y2, ly2)?;
        let iwd = tape.sub(ix2, ix1)?;
        let iw = tape.relu(iwd);
        let ihd = tape.sub(iy2, iy1)?;
        let ih = tape.relu(ihd);
        let inter = tape.mul(iw, ih)?;
        let parea = tape.mul(w, h)?;
        let a_sum = tape.add(parea, larea)?;
        let union = tape.sub(a_sum, inter)?;
        let iou_v = tape.div(inter, union)?;
        let neg_iou = tape.mul_scalar(iou_v, -1.0);
        let one_minus = tape.add_scalar(neg_iou, 1.0);
        let box_loss = tape.mean_all(one_minus);

        let cls_logits = tape.slice_axis(gathered, 1, CLASS_CHANNEL, num_classes)?;
        let mut onehot = vec![0.0; m * num_classes];
        for (i, l) in assigned.iter().enumerate() {
            onehot[i * num_classes + l.class_id] = 1.0;
        }
        let cls_t = tape.constant(vec![m, num_classes], onehot)?;
        let cls_bce = tape.bce_with_logits(cls_logits, cls_t)?;
        let cls_loss = tape.mean_all(cls_bce);
        (box_loss, cls_loss)
    };

    let wb = tape.mul_scalar(box_loss, weights.box_weight);
    let wc = tape.mul_scalar(conf_loss, weights.conf_weight);
    let wk = tape.mul_scalar(cls_loss, weights.cls_weight);
    let bc = tape.add(wb, wc)?;
    let total = tape.add(bc, wk)?;
    Ok(DetectLoss { total, box_loss, conf_loss, cls_loss, matched: m })
}

/// Read gradients for every parameter leaf of a forward pass, in
/// `params_mut` order. Parameters untouched by the loss get zeros.
pub fn read_param_grads(tape: &Tape, fwd: &Forward) -> Vec<Vec<f64>> {
    fwd.param_ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect()
}
