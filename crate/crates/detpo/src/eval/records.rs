//! The detections file format: one JSON object per line with
//! `{"image_id", "category_id", "bbox": [x1, y1, x2, y2], "score"}` in
//! pixel space, carrying the source category id of the annotation file.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassTable;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

use super::Detection;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    /// Missing scores default to 1.0 at conversion time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn detection_to_record(det: &Detection, table: &ClassTable) -> Result<DetectionRecord> {
    let class = table
        .get(det.class_id)
        .ok_or_else(|| Error::Dataset(format!("unknown class id {}", det.class_id)))?;
    Ok(DetectionRecord {
        image_id: det.image_id,
        category_id: class.source_id,
        bbox: det.bbox.as_array(),
        score: Some(det.score),
    })
}

pub fn detection_from_record(rec: &DetectionRecord, table: &ClassTable) -> Result<Detection> {
    let class = rec
        .category_id
        .try_into()
        .ok()
        .and_then(|id: u64| table.by_source_id(id))
        .ok_or_else(|| Error::Dataset(format!("unknown category id {}", rec.category_id)))?;
    if rec.bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!("non-finite bbox {:?}", rec.bbox)));
    }
    Ok(Detection {
        image_id: rec.image_id,
        class_id: class.id,
        bbox: BoundingBox::normalized(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]),
        score: rec.score.unwrap_or(1.0).clamp(0.0, 1.0),
    })
}

pub fn read_detections_jsonl(path: &Path, table: &ClassTable) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)?;
        out.push(detection_from_record(&rec, table)?);
    }
    Ok(out)
}

pub fn write_detections_jsonl(path: &Path, detections: &[Detection], table: &ClassTable) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for det in detections {
        let rec = detection_to_record(det, table)?;
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
