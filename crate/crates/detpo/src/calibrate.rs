//! Confidence handling: self-reported score defaults, and VQA-score
//! re-ranking of detections via yes/no token probabilities, optionally on
//! a scoring backend distinct from the detector.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::annotate::{self, BoxColor};
use crate::backend::{AnnotationSummary, Backend, ChatRequest, ImagePayload, Usage};
use crate::dataset::{ClassTable, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{Detection, DetectionRecord};
use crate::prompts::{PromptRegistry, TemplateId};

/// Fill in absent scores (models that never report confidence get 1.0 per
/// box) and clamp present ones into `[0, 1]`.
pub fn apply_score_defaults(records: &mut [DetectionRecord]) {
    for rec in records {
        rec.score = Some(rec.score.unwrap_or(1.0).clamp(0.0, 1.0));
    }
}

/// Per-detection audit entry written alongside rescored detections.
#[derive(Debug, Clone, Serialize)]
pub struct RescoreAudit {
    pub index: usize,
    pub image_id: u64,
    pub class_id: u32,
    pub p_yes: f64,
    pub p_no: f64,
    /// True when the original score was kept (query failed or the yes/no
    /// mass was zero).
    pub kept_original: bool,
}

#[derive(Debug, Clone)]
pub struct RescoreOutcome {
    pub detections: Vec<Detection>,
    pub audits: Vec<RescoreAudit>,
    pub usage: Usage,
    pub requests: u64,
}

/// Replace each detection's score with `p_yes / (p_yes + p_no)` from a
/// yes/no query about its red-boxed instance in context. Boxes, labels,
/// and image assignments never change; one request per detection. Failed
/// queries keep the original score and are flagged in the audit.
pub fn vqa_rescore(
    detections: &[Detection],
    split: &DatasetSplit,
    table: &ClassTable,
    definitions: &BTreeMap<u32, String>,
    backend: &dyn Backend,
    registry: &PromptRegistry,
) -> Result<RescoreOutcome> {
    if !backend.descriptor().supports_logprobs {
        return Err(Error::Capability(format!(
            "scoring backend {} does not expose token log probabilities",
            backend.descriptor().name
        )));
    }
    let system = registry.template(TemplateId::System).text.clone();

    let mut out = Vec::with_capacity(detections.len());
    let mut audits = Vec::with_capacity(detections.len());
    let mut usage = Usage::default();
    let mut requests = 0u64;

    for (index, det) in detections.iter().enumerate() {
        let mut rescored = det.clone();
        let mut audit = RescoreAudit {
            index,
            image_id: det.image_id,
            class_id: det.class_id,
            p_yes: 0.0,
            p_no: 0.0,
            kept_original: true,
        };

        match vqa_query(det, split, table, definitions, backend, registry, &system) {
            Ok((p_yes, p_no, used)) => {
                requests += 1;
                usage.add(&used);
                audit.p_yes = p_yes;
                audit.p_no = p_no;
                let denom = p_yes + p_no;
                if denom > f64::EPSILON {
                    rescored.score = p_yes / denom;
                    audit.kept_original = false;
                }
            }
            Err(_) => {}
        }
        audits.push(audit);
        out.push(rescored);
    }

    Ok(RescoreOutcome {
        detections: out,
        audits,
        usage,
        requests,
    })
}

fn vqa_query(
    det: &Detection,
    split: &DatasetSplit,
    table: &ClassTable,
    definitions: &BTreeMap<u32, String>,
    backend: &dyn Backend,
    registry: &PromptRegistry,
    system: &str,
) -> Result<(f64, f64, Usage)> {
    let image = split
        .image(det.image_id)
        .ok_or_else(|| Error::Dataset(format!("image {} not in split", det.image_id)))?;
    let class = table
        .get(det.class_id)
        .ok_or_else(|| Error::Dataset(format!("unknown class {}", det.class_id)))?;
    let definition = definitions
        .get(&det.class_id)
        .map(String::as_str)
        .unwrap_or(class.seed_description.as_str());

    let bytes = image.load_bytes()?;
    let desc = backend.descriptor();
    let annotated = annotate::draw_boxes(&bytes, &[(det.bbox, BoxColor::Red)], None)?;
    let encoded =
        annotate::encode_jpeg_capped(&annotated, desc.image_jpeg_quality, desc.image_max_side)?;

    let mut slots = BTreeMap::new();
    slots.insert("prompt".to_string(), class.name.clone());
    slots.insert("dataset_instructions".to_string(), definition.to_string());
    let text = registry.render(TemplateId::VqaScore, &slots)?;

    let request = ChatRequest::new(system)
        .text(text)
        .image(ImagePayload {
            image_id: image.id,
            bytes: std::sync::Arc::new(encoded),
            mime: "image/jpeg".to_string(),
            annotations: vec![AnnotationSummary {
                bbox: det.bbox.as_array(),
                color: BoxColor::Red,
            }],
        })
        .logprobs(true);

    // One completion serves both the probabilities and the usage figures.
    let response = backend.complete(&request)?;
    let usage = response.usage;
    let table_entries = response
        .top_logprobs
        .ok_or_else(|| Error::Backend("response carried no logprob table".into()))?;
    let mut p_yes = 0.0;
    let mut p_no = 0.0;
    let mut seen = false;
    for (token, logprob) in &table_entries {
        let t = token.trim_start();
        if t.eq_ignore_ascii_case("yes") {
            p_yes += logprob.exp();
            seen = true;
        } else if t.eq_ignore_ascii_case("no") {
            p_no += logprob.exp();
            seen = true;
        }
    }
    if !seen {
        return Err(Error::Backend("no yes/no token variants in table".into()));
    }
    Ok((p_yes, p_no, usage))
}
