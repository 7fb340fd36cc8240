//! Detection metrics: greedy IoU matching, per-class average precision
//! with 101-point interpolation, mAP@[.5:.95] and mAP50.
//!
//! Matching follows the COCO protocol: predictions sorted by descending
//! confidence claim the best-IoU unmatched ground truth of their class,
//! independently at each IoU threshold. Ties break toward the earlier
//! prediction and the earlier ground-truth box, so evaluation is a pure
//! function of its inputs.

use crate::data::Dataset;
use crate::detector::{decode_predictions, iou, BnMode, BoxLabel, DetectorModel};
use crate::error::{Error, Result};
use crate::tape::Tape;

pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Decode threshold for metric runs: low enough to trace the full
/// precision-recall curve, high enough to keep NMS cheap.
pub const EVAL_CONF: f64 = 0.01;
pub const EVAL_NMS_IOU: f64 = 0.45;

#[derive(Clone, Debug)]
pub struct ClassAp {
    pub class_id: usize,
    /// AP at each entry of IOU_THRESHOLDS
    pub ap_per_threshold: Vec<f64>,
}

impl ClassAp {
    pub fn ap50(&self) -> f64 {
        self.ap_per_threshold[0]
    }

    pub fn ap_5095(&self) -> f64 {
        self.ap_per_threshold.iter().sum::<f64>() / self.ap_per_threshold.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    /// classes that appear in the ground truth, ascending id
    pub classes: Vec<ClassAp>,
    pub map_5095: f64,
    pub map_50: f64,
    /// match counts at IoU 0.50 over all scored predictions
    pub tp50: usize,
    pub fp50: usize,
    pub fn50: usize,
}

/// 101-point interpolated AP from ranked hit flags.
/// `tp_flags[k]` says whether the k'th ranked prediction matched.
pub(crate) fn average_precision(tp_flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recalls.push(tp as f64 / npos as f64);
        precisions.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope: max precision at any recall >= r
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        // recalls are non-decreasing; first index reaching r
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|k| envelope[k])
            .unwrap_or(0.0);
        sum += p;
    }
    sum / 101.0
}

/// Pure metric computation over per-image predictions and ground truth.
pub fn evaluate_detections(
    detections: &[Vec<BoxLabel>],
    ground_truth: &[Vec<BoxLabel>],
    num_classes: usize,
) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} detection lists vs {} truth lists", detections.len(), ground_truth.len()),
        ));
    }
    if ground_truth.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }

    let mut classes = Vec::new();
    let (mut tp50, mut fp50, mut fn50) = (0usize, 0usize, 0usize);
    for class_id in 0..num_classes {
        let npos: usize =
            ground_truth.iter().map(|g| g.iter().filter(|l| l.class_id == class_id).count()).sum();
        if npos == 0 {
            continue;
        }
        // ranked predictions of this class: confidence desc, then image
        // and in-image index asc
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (k, d) in dets.iter().enumerate() {
                if d.class_id == class_id {
                    ranked.push((d.confidence, img, k));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut ap_per_threshold = Vec::with_capacity(IOU_THRESHOLDS.len());
        for (ti, &thresh) in IOU_THRESHOLDS.iter().enumerate() {
            let mut matched: Vec<Vec<bool>> =
                ground_truth.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp_flags = Vec::with_capacity(ranked.len());
            for &(_, img, k) in &ranked {
                let det = &detections[img][k];
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in ground_truth[img].iter().enumerate() {
                    if gt.class_id != class_id || matched[img][gi] {
                        continue;
                    }
                    let v = iou(det, gt);
                    if v >= thresh && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((gi, v));
                    }
                }
                match best {
                    Some((gi, _)) => {
                        matched[img][gi] = true;
                        tp_flags.push(true);
                    }
                    None => tp_flags.push(false),
                }
            }
            if ti == 0 {
                let tp = tp_flags.iter().filter(|&&t| t).count();
                tp50 += tp;
                fp50 += tp_flags.len() - tp;
                fn50 += npos - tp;
            }
            ap_per_threshold.push(average_precision(&tp_flags, npos));
        }
        classes.push(ClassAp { class_id, ap_per_threshold });
    }
    if classes.is_empty() {
        return Err(Error::invalid("evaluate", "ground truth contains no objects"));
    }
    let map_50 = classes.iter().map(|c| c.ap50()).sum::<f64>() / classes.len() as f64;
    let map_5095 = classes.iter().map(|c| c.ap_5095()).sum::<f64>() / classes.len() as f64;
    Ok(EvalResult { classes, map_5095, map_50, tp50, fp50, fn50 })
}

/// Run the model over the chosen images (eval-mode BN, no stat updates)
/// and score its decoded detections.
pub fn evaluate_model(
    model: &DetectorModel,
    ds: &Dataset,
    indices: &[usize],
    conf_thresh: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut detections = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = ds.batch(chunk);
        let mut tape = Tape::new();
        let x = tape.leaf(&images);
        let fwd = model.forward(&mut tape, x, BnMode::Eval)?;
        let pred = tape.to_tensor(fwd.pred);
        detections.extend(decode_predictions(
            &pred,
            model.cfg.num_classes,
            conf_thresh,
            nms_iou,
        )?);
    }
    let truth = ds.batch_labels(indices);
    evaluate_detections(&detections, &truth, model.cfg.num_classes)
}

/// Rows: one per class, then a `mean` summary row.
pub fn result_csv(r: &EvalResult) -> String {
    let mut out = String::from("class,ap50,ap\n");
    for c in &r.classes {
        out.push_str(&format!("{},{:.6},{:.6}\n", c.class_id, c.ap50(), c.ap_5095()));
    }
    out.push_str(&format!("mean,{:.6},{:.6}\n", r.map_50, r.map_5095));
    out
}

pub fn summary_text(r: &EvalResult, class_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>8} {:>8}\n", "class", "AP50", "AP"));
    for c in &r.classes {
        let name = class_names
            .get(c.class_id)
            .map(|s| s.as_str())
            .unwrap_or("?");
        out.push_str(&format!("{:<10} {:>8.4} {:>8.4}\n", name, c.ap50(), c.ap_5095()));
    }
    out.push_str(&format!("{:<10} {:>8.4} {:>8.4}\n", "mAP", r.map_50, r.map_5095));
    out.push_str(&format!(
        "tp/fp/fn at IoU 0.50: {}/{}/{}\n",
        r.tp50, r.fp50, r.fn50
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::detector::ModelConfig;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn boxed(class_id: usize, cx: f64, cy: f64, s: f64, conf: f64) -> BoxLabel {
        BoxLabel { class_id, cx, cy, w: s, h: s, confidence: conf }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let ds = generate(&DatasetSpec { num_images: 12, seed: 2, ..DatasetSpec::default() })
            .unwrap();
        let preds: Vec<Vec<BoxLabel>> = ds.labels.clone();
        let r = evaluate_detections(&preds, &ds.labels, 6).unwrap();
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.map_5095, 1.0);
        assert_eq!(r.fp50, 0);
        assert_eq!(r.fn50, 0);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gts = vec![vec![boxed(0, 0.5, 0.5, 0.2, 1.0)], vec![boxed(1, 0.3, 0.3, 0.2, 1.0)]];
        let preds = vec![vec![], vec![]];
        let r = evaluate_detections(&preds, &gts, 2).unwrap();
        assert_eq!(r.map_50, 0.0);
        assert_eq!(r.map_5095, 0.0);
        assert_eq!(r.fn50, 2);
    }

    /// Three images, two classes, one false positive and one false
    /// negative. Hand computation:
    ///   class 0: ranked [TP at 0.9, FP at 0.8], npos 2
    ///     -> recall 0.5 at precision 1.0, envelope 1.0 up to r=0.50
    ///     -> AP = 51/101
    ///   class 1: two exact matches, AP = 1
    ///   mAP50 = (51/101 + 1)/2 = 76/101, identical at every threshold
    ///   because hits have IoU 1.0 and the miss has IoU 0.
    #[test]
    fn hand_computed_pr_curve() {
        let a = boxed(0, 0.2, 0.2, 0.2, 1.0);
        let b = boxed(0, 0.7, 0.7, 0.2, 1.0);
        let c = boxed(1, 0.3, 0.6, 0.2, 1.0);
        let d = boxed(1, 0.5, 0.4, 0.2, 1.0);
        let gts = vec![vec![a], vec![b, c], vec![d]];
        let preds = vec![
            vec![BoxLabel { confidence: 0.9, ..a }],
            vec![boxed(0, 0.25, 0.75, 0.1, 0.8), BoxLabel { confidence: 0.7, ..c }],
            vec![BoxLabel { confidence: 0.6, ..d }],
        ];
        let r = evaluate_detections(&preds, &gts, 2).unwrap();
        let want_c0 = 51.0 / 101.0;
        assert!((r.classes[0].ap50() - want_c0).abs() < 1e-12);
        assert!((r.classes[1].ap50() - 1.0).abs() < 1e-12);
        assert!((r.map_50 - 76.0 / 101.0).abs() < 1e-12);
        assert!((r.map_5095 - r.map_50).abs() < 1e-12);
        assert_eq!((r.tp50, r.fp50, r.fn50), (3, 1, 1));
    }

    #[test]
    fn ap_matches_brute_force_interpolation() {
        let mut rng = stream_rng(3, 30);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            let hits = flags.iter().filter(|&&b| b).count();
            let npos = hits + rng.gen_range(0..4);
            if npos == 0 {
                continue;
            }
            // literal definition: for each of the 101 recall points scan
            // every cut of the ranking
            let mut want = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                let mut best = 0.0f64;
                let mut tp = 0;
                for (k, &hit) in flags.iter().enumerate() {
                    if hit {
                        tp += 1;
                    }
                    let recall = tp as f64 / npos as f64;
                    let precision = tp as f64 / (k + 1) as f64;
                    if recall >= r - 1e-12 {
                        best = best.max(precision);
                    }
                }
                want += best;
            }
            want /= 101.0;
            let got = average_precision(&flags, npos);
            assert!((got - want).abs() < 1e-12, "flags {flags:?} npos {npos}");
        }
    }

    #[test]
    fn envelope_is_monotone() {
        let mut rng = stream_rng(4, 31);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let npos = flags.iter().filter(|&&b| b).count().max(1);
            let mut tp = 0;
            let mut prec = Vec::new();
            for (k, &h) in flags.iter().enumerate() {
                if h {
                    tp += 1;
                }
                prec.push(tp as f64 / (k + 1) as f64);
            }
            let mut env = prec.clone();
            for k in (0..env.len() - 1).rev() {
                env[k] = env[k].max(env[k + 1]);
            }
            for k in 1..env.len() {
                assert!(env[k - 1] >= env[k]);
            }
            // touching the envelope code path
            let _ = average_precision(&flags, npos);
        }
    }

    #[test]
    fn duplicate_of_matched_gt_never_raises_map() {
        let mut rng = stream_rng(5, 32);
        for round in 0..60 {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for _ in 0..3 {
                let n = rng.gen_range(1..4);
                let gt: Vec<BoxLabel> = (0..n)
                    .map(|_| {
                        boxed(
                            rng.gen_range(0..2),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.1..0.3),
                            1.0,
                        )
                    })
                    .collect();
                // predictions: jittered copies plus occasional noise
                let mut pd: Vec<BoxLabel> = Vec::new();
                for l in &gt {
                    if rng.gen_bool(0.8) {
                        pd.push(BoxLabel {
                            cx: l.cx + rng.gen_range(-0.02..0.02),
                            confidence: rng.gen_range(0.3..1.0),
                            ..*l
                        });
                    }
                }
                if rng.gen_bool(0.3) {
                    pd.push(boxed(rng.gen_range(0..2), 0.9, 0.9, 0.05, rng.gen_range(0.1..0.9)));
                }
                gts.push(gt);
                preds.push(pd);
            }
            let base = evaluate_detections(&preds, &gts, 2).unwrap();
            // duplicate one prediction at no higher confidence
            let img = preds.iter().position(|p| !p.is_empty());
            let Some(img) = img else { continue };
            let src = preds[img][0];
            let dup = BoxLabel { confidence: src.confidence * rng.gen_range(0.2..1.0), ..src };
            preds[img].push(dup);
            let bumped = evaluate_detections(&preds, &gts, 2).unwrap();
            assert!(
                bumped.map_5095 <= base.map_5095 + 1e-12,
                "round {round}: {} > {}",
                bumped.map_5095,
                base.map_5095
            );
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let ds = generate(&DatasetSpec { num_images: 8, seed: 6, ..DatasetSpec::default() })
            .unwrap();
        let preds: Vec<Vec<BoxLabel>> = ds
            .labels
            .iter()
            .map(|ls| {
                ls.iter()
                    .map(|l| BoxLabel { cx: l.cx + 0.01, confidence: 0.7, ..*l })
                    .collect()
            })
            .collect();
        let a = evaluate_detections(&preds, &ds.labels, 6).unwrap();
        let b = evaluate_detections(&preds, &ds.labels, 6).unwrap();
        assert_eq!(a.map_5095.to_bits(), b.map_5095.to_bits());
        assert_eq!(a.map_50.to_bits(), b.map_50.to_bits());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(evaluate_detections(&[], &[], 2).is_err());
        let ds = generate(&DatasetSpec { num_images: 2, seed: 1, ..DatasetSpec::default() })
            .unwrap();
        let model = DetectorModel::new(ModelConfig::default()).unwrap();
        assert!(evaluate_model(&model, &ds, &[], 0.05, 0.45, 8).is_err());
    }

    #[test]
    fn untrained_model_evaluates_in_range() {
        let ds = generate(&DatasetSpec {
            num_images: 4,
            image_size: 32,
            seed: 7,
            ..DatasetSpec::default()
        })
        .unwrap();
        let model = DetectorModel::new(ModelConfig {
            image_size: 32,
            channels: vec![4, 6, 8, 10],
            ..ModelConfig::default()
        })
        .unwrap();
        let r = evaluate_model(&model, &ds, &[0, 1, 2, 3], 0.05, 0.45, 2).unwrap();
        assert!(r.map_50 >= r.map_5095);
        assert!((0.0..=1.0).contains(&r.map_50));
        let csv = result_csv(&r);
        assert!(csv.starts_with("class,ap50,ap\n"));
        assert!(csv.trim_end().ends_with(&format!("mean,{:.6},{:.6}", r.map_50, r.map_5095)));
        let names: Vec<String> = ds.manifest.class_names.clone();
        assert!(summary_text(&r, &names).contains("mAP"));
    }
}
