//! Parsing detections out of untrusted model output.
//!
//! Model responses range from clean JSON arrays to fenced blocks buried in
//! prose to truncated garbage. Parsing never fails hard: the worst case is
//! an empty detection list with the parse-failure flag set.

use serde_json::Value;

use crate::dataset::{ClassTable, ImageRecord};
use crate::eval::Detection;
use crate::geometry::rescale;

use super::CoordinateConvention;

/// Hard cap on detections per response, mirroring the prompt contract.
pub const MAX_PARSED_DETECTIONS: usize = 20;

/// Bound on how many candidate array starts we try inside one response.
const MAX_PARSE_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, Default)]
pub struct ParsedDetections {
    pub detections: Vec<Detection>,
    /// True when no JSON array could be located at all.
    pub parse_failure: bool,
    /// Elements skipped for unknown labels or malformed fields.
    pub dropped: usize,
}

fn fenced_candidates(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        match after.find("```") {
            Some(end) => {
                out.push(&after[..end]);
                rest = &after[end + 3..];
            }
            None => {
                // Unterminated fence: everything after it is still worth a try.
                out.push(after);
                break;
            }
        }
    }
    out
}

/// Parse the first JSON array found in `text`, tolerating code fences,
/// leading prose, and trailing garbage after the array.
fn first_json_array(text: &str) -> Option<Vec<Value>> {
    let mut candidates = fenced_candidates(text);
    candidates.push(text);
    for candidate in candidates {
        let mut attempts = 0;
        for (pos, _) in candidate.match_indices('[') {
            attempts += 1;
            if attempts > MAX_PARSE_ATTEMPTS {
                break;
            }
            let mut stream = serde_json::Deserializer::from_str(&candidate[pos..]).into_iter::<Value>();
            if let Some(Ok(Value::Array(items))) = stream.next() {
                return Some(items);
            }
        }
    }
    None
}

fn field_f64(value: &Value) -> Option<f64> {
    value.as_f64().filter(|v| v.is_finite())
}

/// Extract detections from model text for one image.
///
/// Each element needs a `bbox_2d` of 4 finite numbers and a `label` that
/// matches a known class name (case/whitespace-insensitive); anything else
/// is dropped. Missing scores default to 1.0. Boxes are interpreted in the
/// backend's declared convention, converted to the image's pixel space,
/// corner-normalized, and clamped to image bounds. Exact duplicate boxes
/// of the same class are deduplicated. At most 20 detections come back, in
/// response order.
pub fn parse_detections(
    text: &str,
    convention: &CoordinateConvention,
    image: &ImageRecord,
    table: &ClassTable,
) -> ParsedDetections {
    let (width, height) = (image.width as f64, image.height as f64);
    let Ok(space) = convention.space_for(width, height) else {
        return ParsedDetections {
            parse_failure: true,
            ..Default::default()
        };
    };
    let Ok(pixel_kind) = crate::geometry::CoordinateSpace::pixel(width, height) else {
        return ParsedDetections {
            parse_failure: true,
            ..Default::default()
        };
    };

    let Some(items) = first_json_array(text) else {
        return ParsedDetections {
            parse_failure: true,
            ..Default::default()
        };
    };

    let mut out = ParsedDetections::default();
    let mut seen: std::collections::BTreeSet<(u32, [u64; 4])> = std::collections::BTreeSet::new();

    for item in items {
        if out.detections.len() >= MAX_PARSED_DETECTIONS {
            break;
        }
        let Some(obj) = item.as_object() else {
            out.dropped += 1;
            continue;
        };
        let raw: Option<[f64; 4]> = obj.get("bbox_2d").and_then(|b| b.as_array()).and_then(|arr| {
            if arr.len() != 4 {
                return None;
            }
            let mut vals = [0.0; 4];
            for (i, v) in arr.iter().enumerate() {
                vals[i] = field_f64(v)?;
            }
            Some(vals)
        });
        let Some(raw) = raw else {
            out.dropped += 1;
            continue;
        };
        let Some(label) = obj.get("label").and_then(|l| l.as_str()) else {
            out.dropped += 1;
            continue;
        };
        let Some(class) = table.match_label(label) else {
            out.dropped += 1;
            continue;
        };
        let score = obj
            .get("score")
            .and_then(field_f64)
            .unwrap_or(1.0)
            .clamp(0.0, 1.0);

        let decoded = space.decode(raw);
        let Ok(in_pixels) = rescale(&decoded, &space.kind, &pixel_kind.kind) else {
            out.dropped += 1;
            continue;
        };
        let bbox = in_pixels.clamp_to(width, height);

        let key = (class.id, bbox.as_array().map(f64::to_bits));
        if !seen.insert(key) {
            out.dropped += 1;
            continue;
        }
        out.detections.push(Detection {
            image_id: image.id,
            class_id: class.id,
            bbox,
            score,
        });
    }
    out
}

/// Canonical serialization of a detection list: the format the detection
/// prompts request. `parse_detections` round-trips it exactly.
pub fn serialize_detections(detections: &[Detection], table: &ClassTable) -> String {
    let items: Vec<Value> = detections
        .iter()
        .map(|d| {
            serde_json::json!({
                "bbox_2d": d.bbox.as_array(),
                "label": table.get(d.class_id).map(|c| c.name.clone()).unwrap_or_default(),
                "score": d.score,
            })
        })
        .collect();
    serde_json::to_string(&Value::Array(items)).expect("detection JSON always serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassSpec, ImageSource};
    use crate::geometry::CornerOrder;
    use std::sync::Arc;

    fn table() -> ClassTable {
        ClassTable::new(vec![
            ClassSpec {
                id: 0,
                source_id: 1,
                name: "dog".into(),
                seed_description: String::new(),
                instructions: String::new(),
            },
            ClassSpec {
                id: 1,
                source_id: 2,
                name: "wheat head".into(),
                seed_description: String::new(),
                instructions: String::new(),
            },
        ])
        .unwrap()
    }

    fn image() -> ImageRecord {
        ImageRecord {
            id: 9,
            source: ImageSource::Bytes(Arc::new(Vec::new())),
            width: 100,
            height: 100,
        }
    }

    fn pixel() -> CoordinateConvention {
        CoordinateConvention::Pixel {
            order: CornerOrder::Xyxy,
        }
    }

    #[test]
    fn plain_array_parses() {
        let out = parse_detections(
            r#"[{"bbox_2d":[1,2,3,4],"label":"dog","score":0.9}]"#,
            &pixel(),
            &image(),
            &table(),
        );
        assert!(!out.parse_failure);
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].score, 0.9);
        assert_eq!(out.detections[0].bbox.as_array(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fenced_block_with_prose_parses_like_unfenced() {
        let fenced = "Here are the detections:\n```json\n[{\"bbox_2d\":[1,2,3,4],\"label\":\"dog\"}]\n```\nLet me know!";
        let plain = r#"[{"bbox_2d":[1,2,3,4],"label":"dog"}]"#;
        let a = parse_detections(fenced, &pixel(), &image(), &table());
        let b = parse_detections(plain, &pixel(), &image(), &table());
        assert_eq!(a.detections, b.detections);
    }

    #[test]
    fn missing_score_defaults_to_one() {
        let out = parse_detections(
            r#"[{"bbox_2d":[1,2,3,4],"label":"dog"}]"#,
            &pixel(),
            &image(),
            &table(),
        );
        assert_eq!(out.detections[0].score, 1.0);
    }

    #[test]
    fn unknown_labels_are_dropped() {
        let out = parse_detections(
            r#"[{"bbox_2d":[1,2,3,4],"label":"zebra"},{"bbox_2d":[1,2,3,4],"label":" DOG "}]"#,
            &pixel(),
            &image(),
            &table(),
        );
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.dropped, 1);
        assert_eq!(out.detections[0].class_id, 0);
    }

    #[test]
    fn per_mille_yxyx_converts_to_pixel() {
        let convention = CoordinateConvention::PerMille {
            order: CornerOrder::Yxyx,
        };
        let out = parse_detections(
            r#"[{"bbox_2d":[100,200,300,400],"label":"dog"}]"#,
            &convention,
            &image(),
            &table(),
        );
        // yxyx [100,200,300,400] per-mille on 100x100 -> xyxy [20,10,40,30] px.
        assert_eq!(out.detections[0].bbox.as_array(), [20.0, 10.0, 40.0, 30.0]);
    }

    #[test]
    fn boxes_clamp_and_normalize() {
        let out = parse_detections(
            r#"[{"bbox_2d":[120,-5,60,50],"label":"dog"}]"#,
            &pixel(),
            &image(),
            &table(),
        );
        // corners swapped then clamped to 100x100
        assert_eq!(out.detections[0].bbox.as_array(), [60.0, 0.0, 100.0, 50.0]);
    }

    #[test]
    fn output_truncates_to_twenty() {
        let mut items = Vec::new();
        for i in 0..30 {
            items.push(format!(
                r#"{{"bbox_2d":[{},0,{},10],"label":"dog"}}"#,
                i,
                i + 40
            ));
        }
        let text = format!("[{}]", items.join(","));
        let out = parse_detections(&text, &pixel(), &image(), &table());
        assert_eq!(out.detections.len(), 20);
    }

    #[test]
    fn duplicate_boxes_deduplicate() {
        let out = parse_detections(
            r#"[{"bbox_2d":[1,2,3,4],"label":"dog","score":0.9},{"bbox_2d":[1,2,3,4],"label":"dog","score":0.5}]"#,
            &pixel(),
            &image(),
            &table(),
        );
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].score, 0.9);
    }

    #[test]
    fn garbage_sets_parse_failure() {
        let out = parse_detections("no json here", &pixel(), &image(), &table());
        assert!(out.parse_failure);
        assert!(out.detections.is_empty());

        let out = parse_detections("[1, 2, broken", &pixel(), &image(), &table());
        assert!(out.parse_failure);
    }

    #[test]
    fn roundtrip_canonical_format() {
        let t = table();
        let dets = vec![
            Detection {
                image_id: 9,
                class_id: 0,
                bbox: crate::geometry::BoundingBox::new(1.5, 2.0, 30.0, 44.25),
                score: 0.75,
            },
            Detection {
                image_id: 9,
                class_id: 1,
                bbox: crate::geometry::BoundingBox::new(0.0, 0.0, 10.0, 10.0),
                score: 1.0,
            },
        ];
        let text = serialize_detections(&dets, &t);
        let out = parse_detections(&text, &pixel(), &image(), &t);
        assert_eq!(out.detections, dets);
    }
}
