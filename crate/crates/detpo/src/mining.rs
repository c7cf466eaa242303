//! Severity scoring of detection errors and selection of the worst
//! examples for the refinement loop.
//!
//! A false positive's severity scales with the model's confidence and its
//! overlap with ground truth of other classes (floored at 0.2 so confident
//! hallucinations still register). A false negative's severity is one minus
//! the best score-weighted overlap any same-class detection achieves on it.

use serde::Serialize;

use crate::dataset::DatasetSplit;
use crate::eval::{Detection, EvalResult};
use crate::geometry::{iou, BoundingBox};

/// Floor applied to the other-class overlap term of the FP severity.
pub const FP_OVERLAP_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    FalsePositive,
    FalseNegative,
}

/// The box backing a severity score: the nearest other-class ground truth
/// for a false positive, or the best overlapping detection for a false
/// negative.
#[derive(Debug, Clone, Serialize)]
pub struct SupportBox {
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub iou: f64,
}

/// The highest score-weighted-overlap correctly detected instance,
/// used as the positive visual exemplar during refinement.
#[derive(Debug, Clone, Serialize)]
pub struct Exemplar {
    pub image_id: u64,
    pub detection_bbox: BoundingBox,
    pub ground_truth_bbox: BoundingBox,
    pub score: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub kind: ErrorKind,
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub severity: f64,
    pub support: Option<SupportBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplar: Option<Exemplar>,
}

/// `s_d * max(0.2, IoU with the nearest other-class ground truth)` for an
/// unmatched detection. With no other-class ground truth on the image the
/// overlap term is the floor.
pub fn fp_severity(detection: &Detection, other_class_gts: &[&BoundingBox]) -> (f64, Option<(usize, f64)>) {
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in other_class_gts.iter().enumerate() {
        let overlap = iou(&detection.bbox, gt);
        if best.map_or(true, |(_, b)| overlap > b) {
            best = Some((i, overlap));
        }
    }
    let overlap = best.map_or(0.0, |(_, v)| v);
    let severity = detection.score * overlap.max(FP_OVERLAP_FLOOR);
    (severity, best)
}

/// `sigma = max over detections of s_d * IoU(d, g)` and severity
/// `1 - sigma` for an unmatched ground truth. Sigma is 0 with no
/// detections, so a completely missed instance has severity 1.
pub fn fn_severity(gt_bbox: &BoundingBox, same_class_dets: &[&Detection]) -> (f64, f64, Option<usize>) {
    let mut sigma = 0.0;
    let mut best: Option<usize> = None;
    for (i, det) in same_class_dets.iter().enumerate() {
        let v = det.score * iou(&det.bbox, gt_bbox);
        if best.is_none() || v > sigma {
            sigma = v;
            best = Some(i);
        }
    }
    (1.0 - sigma, sigma, best)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct WorstErrors {
    pub worst_fp: Option<ErrorRecord>,
    pub worst_fn: Option<ErrorRecord>,
    pub best_match: Option<Exemplar>,
}

fn box_key(b: &BoundingBox) -> (u64, u64, u64, u64) {
    (b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits())
}

/// Pick the worst false positive and false negative of `class_id` from an
/// evaluation, skipping candidates on excluded images, plus the best
/// matched pair as exemplar. Severity ties break by `(image id, box)` so
/// selection is deterministic; a tie at severity 0 still returns a record
/// so refinement can proceed. Absent selections mean no such error remains.
pub fn select_worst_errors(
    eval: &EvalResult,
    detections: &[Detection],
    split: &DatasetSplit,
    class_id: u32,
    exclusion: &std::collections::BTreeSet<u64>,
) -> WorstErrors {
    let mut worst_fp: Option<(f64, ErrorRecord)> = None;
    let mut worst_fn: Option<(f64, ErrorRecord)> = None;
    let mut best_match: Option<Exemplar> = None;

    for m in eval.matches.iter().filter(|m| m.class_id == class_id) {
        // Exemplar: matched pair maximizing s_d * IoU (not subject to the
        // exclusion set).
        for pair in &m.result.pairs {
            let det = &detections[m.detections[pair.detection]];
            let gt = &split.ground_truths()[m.ground_truths[pair.ground_truth]];
            let quality = det.score * pair.iou;
            let better = match &best_match {
                None => true,
                Some(cur) => quality > cur.score * cur.iou,
            };
            if better {
                best_match = Some(Exemplar {
                    image_id: m.image_id,
                    detection_bbox: det.bbox,
                    ground_truth_bbox: gt.bbox,
                    score: det.score,
                    iou: pair.iou,
                });
            }
        }

        if exclusion.contains(&m.image_id) {
            continue;
        }

        let other_gts: Vec<&BoundingBox> = split
            .ground_truths_on_image(m.image_id)
            .into_iter()
            .filter(|g| g.class_id != class_id)
            .map(|g| &g.bbox)
            .collect();

        for &d_local in &m.result.unmatched_detections {
            let det = &detections[m.detections[d_local]];
            let (severity, support) = fp_severity(det, &other_gts);
            let record = ErrorRecord {
                kind: ErrorKind::FalsePositive,
                image_id: m.image_id,
                bbox: det.bbox,
                severity,
                support: support.map(|(i, overlap)| SupportBox {
                    image_id: m.image_id,
                    bbox: *other_gts[i],
                    iou: overlap,
                }),
                exemplar: None,
            };
            if candidate_beats(&worst_fp, severity, &record) {
                worst_fp = Some((severity, record));
            }
        }

        let class_dets: Vec<&Detection> = m
            .detections
            .iter()
            .map(|&i| &detections[i])
            .collect();
        for &g_local in &m.result.unmatched_ground_truths {
            let gt = &split.ground_truths()[m.ground_truths[g_local]];
            let (severity, _sigma, best_det) = fn_severity(&gt.bbox, &class_dets);
            let record = ErrorRecord {
                kind: ErrorKind::FalseNegative,
                image_id: m.image_id,
                bbox: gt.bbox,
                severity,
                support: best_det.map(|i| SupportBox {
                    image_id: m.image_id,
                    bbox: class_dets[i].bbox,
                    iou: iou(&class_dets[i].bbox, &gt.bbox),
                }),
                exemplar: None,
            };
            if candidate_beats(&worst_fn, severity, &record) {
                worst_fn = Some((severity, record));
            }
        }
    }

    let mut worst = WorstErrors {
        worst_fp: worst_fp.map(|(_, r)| r),
        worst_fn: worst_fn.map(|(_, r)| r),
        best_match: best_match.clone(),
    };
    if let Some(r) = &mut worst.worst_fp {
        r.exemplar = best_match.clone();
    }
    if let Some(r) = &mut worst.worst_fn {
        r.exemplar = best_match;
    }
    worst
}

fn candidate_beats(current: &Option<(f64, ErrorRecord)>, severity: f64, record: &ErrorRecord) -> bool {
    match current {
        None => true,
        Some((cur_sev, cur_rec)) => {
            if severity != *cur_sev {
                severity > *cur_sev
            } else {
                (record.image_id, box_key(&record.bbox)) < (cur_rec.image_id, box_key(&cur_rec.bbox))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSplit, GroundTruthBox, ImageRecord, ImageSource, SplitRole};
    use crate::eval::coco_map;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    fn det(image_id: u64, class_id: u32, bbox: BoundingBox, score: f64) -> Detection {
        Detection {
            image_id,
            class_id,
            bbox,
            score,
        }
    }

    #[test]
    fn fp_severity_zero_confidence() {
        let d = det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 0.0);
        let (sev, _) = fp_severity(&d, &[]);
        assert_eq!(sev, 0.0);
    }

    #[test]
    fn fp_severity_with_other_class_overlap() {
        // s_d = 0.9, best other-class IoU = 0.5 -> 0.45.
        let d = det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 0.9);
        let other = bb(0.0, 0.0, 10.0, 5.0); // IoU 50/100 = 0.5
        let (sev, support) = fp_severity(&d, &[&other]);
        assert_eq!(sev, 0.45);
        assert_eq!(support.unwrap().1, 0.5);
    }

    #[test]
    fn fp_severity_floor_applies_without_overlap() {
        // s_d = 0.9, no other-class ground truth -> 0.9 * 0.2 = 0.18.
        let d = det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 0.9);
        let (sev, support) = fp_severity(&d, &[]);
        assert!((sev - 0.18).abs() < 1e-15);
        assert!(support.is_none());
    }

    #[test]
    fn fn_severity_no_detections_is_one() {
        let (sev, sigma, best) = fn_severity(&bb(0.0, 0.0, 10.0, 10.0), &[]);
        assert_eq!((sev, sigma), (1.0, 0.0));
        assert!(best.is_none());
    }

    #[test]
    fn fn_severity_perfect_coverage_is_zero() {
        let d = det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 1.0);
        let (sev, sigma, _) = fn_severity(&bb(0.0, 0.0, 10.0, 10.0), &[&d]);
        assert_eq!((sev, sigma), (0.0, 1.0));
    }

    #[test]
    fn fn_severity_partial_coverage() {
        // s = 0.8, IoU = 0.5 -> sigma 0.4, severity 0.6.
        let d = det(1, 0, bb(0.0, 0.0, 10.0, 5.0), 0.8);
        let (sev, sigma, _) = fn_severity(&bb(0.0, 0.0, 10.0, 10.0), &[&d]);
        assert!((sigma - 0.4).abs() < 1e-15);
        assert!((sev - 0.6).abs() < 1e-15);
    }

    fn split_two_images() -> DatasetSplit {
        let images = vec![
            ImageRecord {
                id: 1,
                source: ImageSource::Bytes(Arc::new(Vec::new())),
                width: 100,
                height: 100,
            },
            ImageRecord {
                id: 2,
                source: ImageSource::Bytes(Arc::new(Vec::new())),
                width: 100,
                height: 100,
            },
        ];
        let gts = vec![
            GroundTruthBox {
                image_id: 1,
                class_id: 1,
                bbox: bb(0.0, 0.0, 10.0, 5.0),
            },
            GroundTruthBox {
                image_id: 2,
                class_id: 0,
                bbox: bb(50.0, 50.0, 60.0, 60.0),
            },
        ];
        DatasetSplit::new(SplitRole::Train, images, gts).unwrap()
    }

    #[test]
    fn selection_picks_highest_severity_fp() {
        let split = split_two_images();
        // Both detections are class-0 false positives; the image-1 FP
        // overlaps a class-1 GT at IoU 0.5 (severity 0.45), the image-2 FP
        // overlaps nothing (severity 0.18).
        let dets = vec![
            det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 0.9),
            det(2, 0, bb(0.0, 0.0, 10.0, 10.0), 0.9),
        ];
        let eval = coco_map(&dets, &split, &[0]);
        let worst = select_worst_errors(&eval, &dets, &split, 0, &BTreeSet::new());
        let fp = worst.worst_fp.unwrap();
        assert_eq!(fp.image_id, 1);
        assert_eq!(fp.severity, 0.45);
    }

    #[test]
    fn exclusion_hides_candidates() {
        let split = split_two_images();
        let dets = vec![det(1, 0, bb(0.0, 0.0, 10.0, 10.0), 0.9)];
        let eval = coco_map(&dets, &split, &[0]);
        let mut exclusion = BTreeSet::new();
        exclusion.insert(1u64);
        let worst = select_worst_errors(&eval, &dets, &split, 0, &exclusion);
        assert!(worst.worst_fp.is_none());
        // image 2's class-0 GT is still a selectable FN.
        assert_eq!(worst.worst_fn.unwrap().image_id, 2);
    }

    #[test]
    fn perfect_predictions_select_nothing() {
        let split = split_two_images();
        let dets = vec![
            det(2, 0, bb(50.0, 50.0, 60.0, 60.0), 1.0),
            det(1, 1, bb(0.0, 0.0, 10.0, 5.0), 1.0),
        ];
        let eval = coco_map(&dets, &split, &[0, 1]);
        let worst = select_worst_errors(&eval, &dets, &split, 0, &BTreeSet::new());
        assert!(worst.worst_fp.is_none());
        assert!(worst.worst_fn.is_none());
        assert!(worst.best_match.is_some());
    }

    #[test]
    fn zero_severity_still_selects_first_candidate() {
        let split = split_two_images();
        // Score-0 FP: severity 0; selection still returns it.
        let dets = vec![det(2, 0, bb(0.0, 0.0, 10.0, 10.0), 0.0)];
        let eval = coco_map(&dets, &split, &[0]);
        let worst = select_worst_errors(&eval, &dets, &split, 0, &BTreeSet::new());
        assert_eq!(worst.worst_fp.unwrap().severity, 0.0);
    }
}
