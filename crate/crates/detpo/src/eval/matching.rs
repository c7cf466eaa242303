//! Greedy one-to-one assignment of detections to ground truth.

use serde::Serialize;

use crate::dataset::DatasetSplit;
use crate::geometry::{iou, BoundingBox};

use super::{Detection, ImageClassMatch, PerImageMetrics};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

/// Outcome of matching one pool of detections against one pool of ground
/// truths. Indices refer to the input slices.
#[derive(Debug, Clone, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
    pub iou_threshold: f64,
}

/// Match detections to ground truths of the same image and class.
///
/// Detections are visited in descending score order (ties broken by input
/// order, which keeps golden tests deterministic); each one takes the
/// highest-IoU still-unmatched ground truth at or above the threshold.
/// Zero-area ground truth can never reach a positive IoU and so stays
/// unmatched.
pub fn greedy_match(
    detections: &[(f64, BoundingBox)],
    ground_truths: &[BoundingBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .0
            .partial_cmp(&detections[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut gt_taken = vec![false; ground_truths.len()];
    let mut pairs = Vec::new();
    let mut unmatched_detections = Vec::new();

    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let overlap = iou(&detections[d].1, gt);
            if overlap < iou_threshold {
                continue;
            }
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, overlap)) => {
                gt_taken[g] = true;
                pairs.push(MatchPair {
                    detection: d,
                    ground_truth: g,
                    iou: overlap,
                });
            }
            None => unmatched_detections.push(d),
        }
    }

    unmatched_detections.sort_unstable();
    let unmatched_ground_truths = (0..ground_truths.len()).filter(|&g| !gt_taken[g]).collect();

    MatchResult {
        pairs,
        unmatched_detections,
        unmatched_ground_truths,
        iou_threshold,
    }
}

/// Precision/recall/F1 from matched counts. Both-empty inputs count as
/// vacuous success (all three equal 1), so per-example metrics stay defined
/// when a model correctly abstains.
pub fn per_image_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Run greedy matching for every `(image, class)` cell of a split.
/// `kept` holds the indices of detections that survived the per-image cap.
pub(super) fn match_split(
    detections: &[Detection],
    kept: &[usize],
    split: &DatasetSplit,
    classes: &[u32],
    iou_threshold: f64,
) -> Vec<ImageClassMatch> {
    let mut out = Vec::new();
    for image_id in split.image_ids() {
        for &class_id in classes {
            let det_idx: Vec<usize> = kept
                .iter()
                .copied()
                .filter(|&i| detections[i].image_id == image_id && detections[i].class_id == class_id)
                .collect();
            let gt_idx: Vec<usize> = split
                .ground_truths()
                .iter()
                .enumerate()
                .filter(|(_, g)| g.image_id == image_id && g.class_id == class_id)
                .map(|(i, _)| i)
                .collect();
            if det_idx.is_empty() && gt_idx.is_empty() {
                continue;
            }
            let det_boxes: Vec<(f64, BoundingBox)> = det_idx
                .iter()
                .map(|&i| (detections[i].score, detections[i].bbox))
                .collect();
            let gt_boxes: Vec<BoundingBox> = gt_idx
                .iter()
                .map(|&i| split.ground_truths()[i].bbox)
                .collect();
            let result = greedy_match(&det_boxes, &gt_boxes, iou_threshold);
            out.push(ImageClassMatch {
                image_id,
                class_id,
                detections: det_idx,
                ground_truths: gt_idx,
                result,
            });
        }
    }
    out
}

pub(super) fn per_image_metrics(
    split: &DatasetSplit,
    matches: &[ImageClassMatch],
) -> Vec<PerImageMetrics> {
    split
        .image_ids()
        .into_iter()
        .map(|image_id| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for m in matches.iter().filter(|m| m.image_id == image_id) {
                tp += m.result.pairs.len();
                fp += m.result.unmatched_detections.len();
                fn_ += m.result.unmatched_ground_truths.len();
            }
            let (precision, recall, f1) = per_image_f1(tp, fp, fn_);
            PerImageMetrics {
                image_id,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1,
            }
        })
        .collect()
}
