//! Detection confusion matrix: class-agnostic IoU matching between
//! predictions and ground truth, with background and missed sinks.

use serde::Serialize;

use crate::dataset::{ClassTable, DatasetSplit};
use crate::geometry::iou;

use super::Detection;

/// `(C+1) x (C+1)` counts. Rows are ground-truth classes plus a final
/// background row (detections matching nothing); columns are predicted
/// classes plus a final missed column (ground truth matching nothing).
#[derive(Debug, Clone, Serialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn background_row(&self) -> usize {
        self.num_classes()
    }

    pub fn missed_column(&self) -> usize {
        self.num_classes()
    }

    pub fn get(&self, gt_class: usize, pred_class: usize) -> u64 {
        self.counts[gt_class][pred_class]
    }

    /// Row sum over real (non-background) rows equals that class's ground
    /// truth instance count.
    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("gt\\pred");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",missed\n");
        for (r, row) in self.counts.iter().enumerate() {
            let label = if r == self.background_row() {
                "background"
            } else {
                &self.class_names[r]
            };
            out.push_str(label);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Build the confusion matrix. Detections at or above `score_threshold`
/// are matched to ground truth class-agnostically in descending score
/// order, each taking the highest-IoU unmatched ground truth at or above
/// `iou_threshold`. Matched pairs count at `(gt class, predicted class)`;
/// leftover detections fall in the background row and leftover ground
/// truths in the missed column.
pub fn confusion_matrix(
    detections: &[Detection],
    split: &DatasetSplit,
    table: &ClassTable,
    iou_threshold: f64,
    score_threshold: f64,
) -> ConfusionMatrix {
    let c = table.len();
    let mut counts = vec![vec![0u64; c + 1]; c + 1];

    for image_id in split.image_ids() {
        let mut dets: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.image_id == image_id && d.score >= score_threshold)
            .collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let gts = split.ground_truths_on_image(image_id);
        let mut gt_taken = vec![false; gts.len()];

        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt_taken[g] {
                    continue;
                }
                let overlap = iou(&d.bbox, &gt.bbox);
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
                    counts[gts[g].class_id as usize][d.class_id as usize] += 1;
                }
                None => counts[c][d.class_id as usize] += 1,
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            if !gt_taken[g] {
                counts[gt.class_id as usize][c] += 1;
            }
        }
    }

    ConfusionMatrix {
        class_names: table.iter().map(|s| s.name.clone()).collect(),
        counts,
        iou_threshold,
        score_threshold,
    }
}
