//! TIDE-style decomposition of detection failures into error buckets.

use serde::Serialize;

use crate::dataset::DatasetSplit;
use crate::geometry::iou;

use super::{matching, Detection, WORKING_IOU};

/// Foreground/background IoU cutoffs of the taxonomy.
const FOREGROUND_IOU: f64 = 0.5;
const BACKGROUND_IOU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FpKind {
    /// Well-localized (IoU >= 0.5) on a ground truth of another class.
    Cls,
    /// Correct class but poorly localized (0.1 <= IoU < 0.5).
    Loc,
    /// Wrong class and poorly localized (0.1 <= IoU < 0.5).
    Both,
    /// IoU >= 0.5 with a same-class ground truth that another detection
    /// already claimed.
    Dupe,
    /// No meaningful overlap with any ground truth (IoU < 0.1).
    Bkg,
}

/// Error counts plus FP/FN totals (the count view of the taxonomy, not the
/// delta-mAP attribution of the original method).
#[derive(Debug, Clone, Default, Serialize)]
pub struct TideReport {
    pub cls: u64,
    pub loc: u64,
    pub both: u64,
    pub dupe: u64,
    pub bkg: u64,
    pub miss: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl TideReport {
    pub fn fp_kind_total(&self) -> u64 {
        self.cls + self.loc + self.both + self.dupe + self.bkg
    }
}

/// Classify every false positive into exactly one bucket and count misses.
///
/// Matching runs per image and class at the working threshold first; each
/// unmatched detection is then bucketed with precedence Cls, Dupe, Loc,
/// Both, Bkg (checking the strong-overlap conditions before the weak ones
/// keeps the buckets disjoint and exhaustive). An unmatched ground truth
/// counts as Miss unless a Cls or Loc error already explains it.
pub fn tide_decompose(detections: &[Detection], split: &DatasetSplit) -> TideReport {
    let mut report = TideReport::default();

    // Unmatched ground truths, keyed by global index in the split.
    let mut gt_unmatched: Vec<bool> = Vec::new();
    let mut gt_explained: Vec<bool> = Vec::new();
    gt_unmatched.resize(split.ground_truths().len(), false);
    gt_explained.resize(split.ground_truths().len(), false);

    let classes: Vec<u32> = {
        let mut c: Vec<u32> = split
            .ground_truths()
            .iter()
            .map(|g| g.class_id)
            .chain(detections.iter().map(|d| d.class_id))
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    };

    let kept: Vec<usize> = (0..detections.len())
        .filter(|&i| split.image(detections[i].image_id).is_some())
        .collect();
    let matches = matching::match_split(detections, &kept, split, &classes, WORKING_IOU);

    for m in &matches {
        for &g_local in &m.result.unmatched_ground_truths {
            gt_unmatched[m.ground_truths[g_local]] = true;
        }
        report.false_negatives += m.result.unmatched_ground_truths.len() as u64;
        report.false_positives += m.result.unmatched_detections.len() as u64;
    }

    for m in &matches {
        for &d_local in &m.result.unmatched_detections {
            let det = &detections[m.detections[d_local]];
            let gts = split.ground_truths();

            let mut best_same: Option<(usize, f64)> = None;
            let mut best_other: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if gt.image_id != det.image_id {
                    continue;
                }
                let overlap = iou(&det.bbox, &gt.bbox);
                let slot = if gt.class_id == det.class_id {
                    &mut best_same
                } else {
                    &mut best_other
                };
                if slot.map_or(true, |(_, b)| overlap > b) {
                    *slot = Some((gi, overlap));
                }
            }
            let same = best_same.map_or(0.0, |(_, v)| v);
            let other = best_other.map_or(0.0, |(_, v)| v);

            let kind = if other >= FOREGROUND_IOU {
                FpKind::Cls
            } else if same >= FOREGROUND_IOU {
                FpKind::Dupe
            } else if same >= BACKGROUND_IOU {
                FpKind::Loc
            } else if other >= BACKGROUND_IOU {
                FpKind::Both
            } else {
                FpKind::Bkg
            };

            match kind {
                FpKind::Cls => {
                    report.cls += 1;
                    if let Some((gi, _)) = best_other {
                        gt_explained[gi] = true;
                    }
                }
                FpKind::Loc => {
                    report.loc += 1;
                    if let Some((gi, _)) = best_same {
                        gt_explained[gi] = true;
                    }
                }
                FpKind::Both => report.both += 1,
                FpKind::Dupe => report.dupe += 1,
                FpKind::Bkg => report.bkg += 1,
            }
        }
    }

    report.miss = gt_unmatched
        .iter()
        .zip(&gt_explained)
        .filter(|(u, e)| **u && !**e)
        .count() as u64;

    report
}
