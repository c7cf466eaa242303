//! Average precision with 101-point interpolation.

use crate::dataset::DatasetSplit;
use crate::geometry::iou;

use super::Detection;

/// AP for one class at one IoU threshold over a whole split, following the
/// standard protocol: detections ranked by score (stable on ties), matched
/// greedily per image, precision interpolated at 101 recall points.
///
/// Returns 0 when the class has ground truth but nothing is recalled. A
/// class with no ground truth scores 0 here and is excluded from the mAP
/// average by the caller.
pub fn average_precision(
    detections: &[Detection],
    split: &DatasetSplit,
    class_id: u32,
    iou_threshold: f64,
) -> f64 {
    let all: Vec<usize> = (0..detections.len()).collect();
    average_precision_indexed(detections, &all, split, class_id, iou_threshold)
}

pub(super) fn average_precision_indexed(
    detections: &[Detection],
    kept: &[usize],
    split: &DatasetSplit,
    class_id: u32,
    iou_threshold: f64,
) -> f64 {
    let gt_total = split.class_instance_count(class_id);
    if gt_total == 0 {
        return 0.0;
    }

    // Rank class detections by score, descending, stable on ties.
    let mut ranked: Vec<usize> = kept
        .iter()
        .copied()
        .filter(|&i| detections[i].class_id == class_id && split.image(detections[i].image_id).is_some())
        .collect();
    ranked.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    if ranked.is_empty() {
        return 0.0;
    }

    // Greedy matching in rank order; a taken ground truth stays taken.
    let gts: Vec<(u64, crate::geometry::BoundingBox)> = split
        .ground_truths_of_class(class_id)
        .into_iter()
        .map(|g| (g.image_id, g.bbox))
        .collect();
    let mut gt_taken = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &d in &ranked {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, (img, gbox)) in gts.iter().enumerate() {
            if gt_taken[g] || *img != det.image_id {
                continue;
            }
            let overlap = iou(&det.bbox, gbox);
            if overlap < iou_threshold {
                continue;
            }
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, _)) => {
                gt_taken[g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Cumulative precision/recall points.
    let mut tp_cum = 0usize;
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut precisions = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp_cum += 1;
        }
        recalls.push(tp_cum as f64 / gt_total as f64);
        precisions.push(tp_cum as f64 / (i + 1) as f64);
    }

    // Monotone precision envelope from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }

    // 101-point interpolation.
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= target)
            .map_or(0.0, |idx| precisions[idx]);
        sum += p;
    }
    sum / 101.0
}
