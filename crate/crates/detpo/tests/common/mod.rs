//! Shared test fixtures: an independent brute-force AP oracle, synthetic
//! dataset builders, and scripted-mock helpers for optimizer scenarios.

#![allow(dead_code)]

use std::sync::Arc;

use detpo::dataset::{
    ClassSpec, ClassTable, DatasetSplit, GroundTruthBox, ImageRecord, ImageSource, SplitRole,
};
use detpo::eval::Detection;
use detpo::geometry::BoundingBox;

// ---------------------------------------------------------------------------
// Brute-force PR-curve oracle, independent of the library's evaluator.
//
// For every prefix of the score-ranked detection list it re-runs matching
// from scratch and records one (recall, precision) point, then evaluates
// the 101-point interpolated AP directly from its definition.
// ---------------------------------------------------------------------------

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1).max(0.0) * (a.y2 - a.y1).max(0.0);
    let area_b = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy-match a full prefix from scratch; returns the true-positive count.
fn oracle_match_count(
    prefix: &[&Detection],
    gts: &[(u64, BoundingBox)],
    iou_threshold: f64,
) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for det in prefix {
        let mut best: Option<(usize, f64)> = None;
        for (g, (img, gbox)) in gts.iter().enumerate() {
            if taken[g] || *img != det.image_id {
                continue;
            }
            let overlap = oracle_iou(&det.bbox, gbox);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
    }
    tp
}

pub fn oracle_average_precision(
    detections: &[Detection],
    split: &DatasetSplit,
    class_id: u32,
    iou_threshold: f64,
) -> f64 {
    let gts: Vec<(u64, BoundingBox)> = split
        .ground_truths()
        .iter()
        .filter(|g| g.class_id == class_id)
        .map(|g| (g.image_id, g.bbox))
        .collect();
    if gts.is_empty() {
        return 0.0;
    }

    let mut ranked: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class_id == class_id && split.image(d.image_id).is_some())
        .collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));

    // One PR point per ranked prefix, each matched independently.
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let tp = oracle_match_count(&ranked[..k], &gts, iou_threshold);
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }

    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= target)
            .map(|(_, precision)| *precision)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Dataset mAP by the oracle: mean over classes with ground truth of the
/// mean AP over the ten COCO thresholds.
pub fn oracle_map(detections: &[Detection], split: &DatasetSplit, classes: &[u32]) -> f64 {
    let mut class_means = Vec::new();
    for &class_id in classes {
        let has_gt = split
            .ground_truths()
            .iter()
            .any(|g| g.class_id == class_id);
        if !has_gt {
            continue;
        }
        let mut sum = 0.0;
        for i in 0..10 {
            let thr = (50 + 5 * i) as f64 / 100.0;
            sum += oracle_average_precision(detections, split, class_id, thr);
        }
        class_means.push(sum / 10.0);
    }
    if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset builders
// ---------------------------------------------------------------------------

pub fn tiny_png(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbImage::from_pixel(width, height, image::Rgb([120, 120, 120]));
    detpo::annotate::encode_png(&img).unwrap()
}

pub fn image_record(id: u64, width: u32, height: u32) -> ImageRecord {
    ImageRecord {
        id,
        source: ImageSource::Bytes(Arc::new(tiny_png(width, height))),
        width,
        height,
    }
}

pub fn class_table(names: &[&str]) -> ClassTable {
    ClassTable::new(
        names
            .iter()
            .enumerate()
            .map(|(i, name)| ClassSpec {
                id: i as u32,
                source_id: i as u64 + 1,
                name: name.to_string(),
                seed_description: format!("seed description of {name}"),
                instructions: String::new(),
            })
            .collect(),
    )
    .unwrap()
}

pub fn split_from(gts: Vec<(u64, u32, [f64; 4])>, image_ids: &[u64], dims: (u32, u32)) -> DatasetSplit {
    let images = image_ids
        .iter()
        .map(|&id| image_record(id, dims.0, dims.1))
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

pub fn det(image_id: u64, class_id: u32, b: [f64; 4], score: f64) -> Detection {
    Detection {
        image_id,
        class_id,
        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
        score,
    }
}

/// JSON detection payload in the canonical response format.
pub fn detection_json(items: &[( [f64; 4], &str, f64 )]) -> String {
    let values: Vec<serde_json::Value> = items
        .iter()
        .map(|(bbox, label, score)| {
            serde_json::json!({"bbox_2d": bbox, "label": label, "score": score})
        })
        .collect();
    serde_json::to_string(&values).unwrap()
}

// ---------------------------------------------------------------------------
// Request classification for responder-style mocks
// ---------------------------------------------------------------------------

pub const ANCHOR_SUMMARIZE: &str = "key visual characteristics that are consistently";
pub const ANCHOR_INCLUDE: &str = "similar to the one seen in the blue";
pub const ANCHOR_EXCLUDE: &str = "reducing false positives similar to the one";
pub const ANCHOR_ALTERNATIVE: &str = "Refine the class definition";
pub const ANCHOR_DETECT: &str = "Identify and localize all instances";
pub const ANCHOR_VQA: &str = "Please answer Yes or No";

/// Wrap a definition in the fenced mapping format refinement prompts ask for.
pub fn fenced(class: &str, definition: &str) -> String {
    format!("```python {{'{class}': '{definition}'}}```")
}

/// Find a `defv<k>` version marker in request text.
pub fn version_in(text: &str) -> Option<u32> {
    let idx = text.find("defv")?;
    let digits: String = text[idx + 4..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}
