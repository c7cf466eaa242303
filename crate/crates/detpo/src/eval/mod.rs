//! Detection evaluation: greedy matching, COCO-style AP/mAP, per-image F1,
//! confusion matrices, and TIDE-style error decomposition.

mod ap;
mod confusion;
mod matching;
mod records;
mod tide;

pub use ap::average_precision;
pub use confusion::{confusion_matrix, ConfusionMatrix};
pub use matching::{greedy_match, per_image_f1, MatchPair, MatchResult};
pub use records::{
    detection_from_record, detection_to_record, read_detections_jsonl, write_detections_jsonl,
    DetectionRecord,
};
pub use tide::{tide_decompose, FpKind, TideReport};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSplit;
use crate::geometry::BoundingBox;

/// The ten COCO IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Default working threshold for FP/FN bookkeeping.
pub const WORKING_IOU: f64 = 0.5;

/// Maximum detections per image under the standard evaluation protocol.
pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;

/// A scored predicted box, always in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Per-class AP across the IoU threshold sweep.
#[derive(Debug, Clone, Serialize)]
pub struct ClassEval {
    pub class_id: u32,
    pub gt_count: usize,
    /// `(iou_threshold, ap)` pairs, ascending threshold.
    pub ap_by_threshold: Vec<(f64, f64)>,
    /// Mean over thresholds.
    pub mean_ap: f64,
}

/// Precision/recall/F1 for one image at the working IoU, aggregated over
/// classes. Empty/empty images count as vacuous success (F1 = 1).
#[derive(Debug, Clone, Serialize)]
pub struct PerImageMetrics {
    pub image_id: u64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The matching of one `(image, class)` cell at the working threshold.
/// Indices inside `result` are local to `detections` / `ground_truths`,
/// which hold indices into the evaluated detection slice and the split's
/// ground-truth list respectively.
#[derive(Debug, Clone)]
pub struct ImageClassMatch {
    pub image_id: u64,
    pub class_id: u32,
    pub detections: Vec<usize>,
    pub ground_truths: Vec<usize>,
    pub result: MatchResult,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_class: Vec<ClassEval>,
    /// Mean over classes with at least one ground-truth instance; 0 when no
    /// evaluated class has ground truth.
    pub dataset_map: f64,
    pub per_image: Vec<PerImageMetrics>,
    pub working_iou: f64,
    pub matches: Vec<ImageClassMatch>,
}

impl EvalResult {
    pub fn total_unmatched_detections(&self) -> usize {
        self.matches.iter().map(|m| m.result.unmatched_detections.len()).sum()
    }

    pub fn total_unmatched_ground_truths(&self) -> usize {
        self.matches.iter().map(|m| m.result.unmatched_ground_truths.len()).sum()
    }

    pub fn total_matched(&self) -> usize {
        self.matches.iter().map(|m| m.result.pairs.len()).sum()
    }

    /// True when every detection and every ground truth is matched at the
    /// working threshold (the early-stop condition of the optimizer).
    pub fn is_perfect(&self) -> bool {
        self.total_unmatched_detections() == 0 && self.total_unmatched_ground_truths() == 0
    }

    pub fn class_eval(&self, class_id: u32) -> Option<&ClassEval> {
        self.per_class.iter().find(|c| c.class_id == class_id)
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            dataset_map: self.dataset_map,
            working_iou: self.working_iou,
            per_class: self.per_class.clone(),
            per_image: self.per_image.clone(),
            true_positives: self.total_matched(),
            false_positives: self.total_unmatched_detections(),
            false_negatives: self.total_unmatched_ground_truths(),
        }
    }
}

/// Serializable projection of an [`EvalResult`].
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub dataset_map: f64,
    pub working_iou: f64,
    pub per_class: Vec<ClassEval>,
    pub per_image: Vec<PerImageMetrics>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Cap detections per image to the standard limit, keeping the highest
/// scores (stable on ties). Returns indices into `detections`.
fn capped_indices(detections: &[Detection], split: &DatasetSplit) -> Vec<usize> {
    let mut kept = Vec::with_capacity(detections.len());
    for image_id in split.image_ids() {
        let mut on_image: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].image_id == image_id)
            .collect();
        on_image.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        on_image.truncate(MAX_DETECTIONS_PER_IMAGE);
        kept.extend(on_image);
    }
    // back to input order so score ties keep breaking by input position
    kept.sort_unstable();
    kept
}

/// Evaluate detections against a split over the COCO threshold sweep.
///
/// `classes` is the evaluation pool; the dataset mAP averages over pool
/// classes that have at least one ground-truth instance. Detections on
/// images outside the split are ignored.
pub fn coco_map(detections: &[Detection], split: &DatasetSplit, classes: &[u32]) -> EvalResult {
    let kept = capped_indices(detections, split);
    let thresholds = coco_iou_thresholds();

    let mut per_class = Vec::new();
    for &class_id in classes {
        let gt_count = split.class_instance_count(class_id);
        let ap_by_threshold: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                (
                    t,
                    ap::average_precision_indexed(detections, &kept, split, class_id, t),
                )
            })
            .collect();
        let mean_ap = if ap_by_threshold.is_empty() {
            0.0
        } else {
            ap_by_threshold.iter().map(|(_, a)| a).sum::<f64>() / ap_by_threshold.len() as f64
        };
        per_class.push(ClassEval {
            class_id,
            gt_count,
            ap_by_threshold,
            mean_ap,
        });
    }

    let with_gt: Vec<&ClassEval> = per_class.iter().filter(|c| c.gt_count > 0).collect();
    let dataset_map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().map(|c| c.mean_ap).sum::<f64>() / with_gt.len() as f64
    };

    let matches = matching::match_split(detections, &kept, split, classes, WORKING_IOU);
    let per_image = matching::per_image_metrics(split, &matches);

    EvalResult {
        per_class,
        dataset_map,
        per_image,
        working_iou: WORKING_IOU,
        matches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSplit, GroundTruthBox, ImageRecord, ImageSource, SplitRole};
    use std::sync::Arc;

    pub(crate) fn split_with(gts: Vec<(u64, u32, [f64; 4])>, image_ids: &[u64]) -> DatasetSplit {
        let images = image_ids
            .iter()
            .map(|&id| ImageRecord {
                id,
                source: ImageSource::Bytes(Arc::new(Vec::new())),
                width: 1000,
                height: 1000,
            })
            .collect();
        let gts = gts
            .into_iter()
            .map(|(image_id, class_id, b)| GroundTruthBox {
                image_id,
                class_id,
                bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
            })
            .collect();
        DatasetSplit::new(SplitRole::Train, images, gts).unwrap()
    }

    pub(crate) fn det(image_id: u64, class_id: u32, b: [f64; 4], score: f64) -> Detection {
        Detection {
            image_id,
            class_id,
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
            score,
        }
    }

    #[test]
    fn perfect_detections_give_map_one() {
        let split = split_with(
            vec![(1, 0, [0.0, 0.0, 10.0, 10.0]), (2, 0, [5.0, 5.0, 25.0, 25.0])],
            &[1, 2],
        );
        let dets = vec![
            det(1, 0, [0.0, 0.0, 10.0, 10.0], 1.0),
            det(2, 0, [5.0, 5.0, 25.0, 25.0], 1.0),
        ];
        let result = coco_map(&dets, &split, &[0]);
        assert_eq!(result.dataset_map, 1.0);
        assert!(result.is_perfect());
    }

    #[test]
    fn empty_detections_give_map_zero() {
        let split = split_with(vec![(1, 0, [0.0, 0.0, 10.0, 10.0])], &[1]);
        let result = coco_map(&[], &split, &[0]);
        assert_eq!(result.dataset_map, 0.0);
        assert!(!result.is_perfect());
    }

    #[test]
    fn iou_055_passes_exactly_two_thresholds() {
        // GT [0,0,31,10] vs det [9,0,40,10]: inter 22*10, union 40*10, IoU = 0.55.
        let split = split_with(vec![(1, 0, [0.0, 0.0, 31.0, 10.0])], &[1]);
        let dets = vec![det(1, 0, [9.0, 0.0, 40.0, 10.0], 0.9)];
        let result = coco_map(&dets, &split, &[0]);
        assert_eq!(result.dataset_map, 0.2);
    }

    #[test]
    fn classes_without_gt_are_excluded_from_map() {
        let split = split_with(vec![(1, 0, [0.0, 0.0, 10.0, 10.0])], &[1]);
        let dets = vec![det(1, 0, [0.0, 0.0, 10.0, 10.0], 1.0)];
        // class 1 has no ground truth; mAP should still be 1.0.
        let result = coco_map(&dets, &split, &[0, 1]);
        assert_eq!(result.dataset_map, 1.0);
    }

    #[test]
    fn detections_capped_at_100_per_image() {
        let split = split_with(vec![(1, 0, [0.0, 0.0, 10.0, 10.0])], &[1]);
        let mut dets = vec![];
        // 150 low-scoring far-away false positives followed by the true box.
        for i in 0..150 {
            dets.push(det(1, 0, [500.0, 500.0, 510.0, 510.0], 0.5 - (i as f64) * 1e-4));
        }
        dets.push(det(1, 0, [0.0, 0.0, 10.0, 10.0], 0.4));
        let result = coco_map(&dets, &split, &[0]);
        // The true detection scores below the top 100 FPs, so it is dropped
        // by the cap and AP is 0.
        assert_eq!(result.dataset_map, 0.0);
    }
}
