//! The three-stage per-class prompt optimization loop.
//!
//! Stage 1 bootstraps a class definition from green-boxed positives, then
//! sharpens it against one red-boxed negative per other class. Stage 2
//! repeatedly detects on the training split, picks the worst false
//! negative and false positive, asks the model to broaden then tighten the
//! definition, and keeps the result only when training mAP does not drop.
//! Stage 3 generates a text-only alternative and picks the best of the
//! candidate prompts on a validation split.

mod trace;

pub use trace::{ClassTrace, IterationAction, Phase, RequestKind, TraceEvent};

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{self, BoxColor};
use crate::backend::{
    parse_detections, AnnotationSummary, Backend, ChatRequest, ChatResponse, ImagePayload,
};
use crate::dataset::{subsample_k_shot, ClassSpec, ClassTable, DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::eval::{coco_map, Detection, EvalResult};
use crate::geometry::BoundingBox;
use crate::mining::select_worst_errors;
use crate::prompts::{extract_definition, PromptRegistry, TemplateId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Refinement iteration budget. Training gains plateau well before 10
    /// on the benchmark this defaults from.
    pub t_max: u32,
    /// Subsample the training split to at most this many images per class.
    pub k_shot: Option<usize>,
    /// Working IoU for FP/FN bookkeeping.
    pub iou_threshold: f64,
    pub detect_temperature: f64,
    pub refine_temperature: f64,
    pub max_output_tokens: u32,
    /// Extra attempts when definition extraction fails.
    pub refinement_retries: u32,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            t_max: 10,
            k_shot: None,
            iou_threshold: 0.5,
            detect_temperature: 0.0,
            refine_temperature: 0.7,
            max_output_tokens: 2048,
            refinement_retries: 1,
            seed: 0,
        }
    }
}

/// Lineage of a candidate prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seed,
    Stage1,
    Iteration(u32),
    Best,
    Final,
    Alternative,
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Seed => "seed".into(),
            Provenance::Stage1 => "stage1".into(),
            Provenance::Iteration(t) => format!("iteration-{t}"),
            Provenance::Best => "best".into(),
            Provenance::Final => "final-iteration".into(),
            Provenance::Alternative => "alternative".into(),
        }
    }

    /// Tie-break priority for validation selection: best beats the final
    /// iteration beats the alternative beats stage 1 beats the seed.
    fn priority(&self) -> u8 {
        match self {
            Provenance::Best => 5,
            Provenance::Final => 4,
            Provenance::Alternative => 3,
            Provenance::Stage1 => 2,
            Provenance::Seed => 1,
            Provenance::Iteration(_) => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptCandidate {
    pub class_id: u32,
    pub text: String,
    pub provenance: Provenance,
    pub train_map: Option<f64>,
    pub val_map: Option<f64>,
}

/// Mutable per-class trajectory of stage 2.
#[derive(Debug, Clone)]
pub struct OptimizationState {
    pub class_id: u32,
    pub current: String,
    pub best: String,
    pub best_train_map: f64,
    pub accepted_train_map: f64,
    pub t: u32,
    pub t_max: u32,
    pub exclusion: BTreeSet<u64>,
}

#[derive(Debug, Clone)]
pub struct ClassOutcome {
    pub class_id: u32,
    pub class_name: String,
    pub selected: PromptCandidate,
    pub candidates: Vec<PromptCandidate>,
    pub trace: ClassTrace,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct DatasetOutcome {
    pub classes: Vec<ClassOutcome>,
}

impl DatasetOutcome {
    pub fn final_prompts(&self) -> FinalPrompts {
        let mut map = BTreeMap::new();
        for outcome in &self.classes {
            map.insert(
                outcome.class_name.clone(),
                FinalPromptEntry {
                    definition: outcome.selected.text.clone(),
                    provenance: outcome.selected.provenance.label(),
                    train_map: outcome.selected.train_map,
                    val_map: outcome.selected.val_map,
                },
            );
        }
        FinalPrompts(map)
    }
}

/// The final prompt file: class name -> selected definition with lineage
/// and the mAPs that justified it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FinalPrompts(pub BTreeMap<String, FinalPromptEntry>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalPromptEntry {
    pub definition: String,
    pub provenance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map: Option<f64>,
}

impl FinalPrompts {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn definition_for(&self, class_name: &str) -> Option<&str> {
        self.0.get(class_name).map(|e| e.definition.as_str())
    }
}

fn slot_map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Everything one class optimization needs, bundled so stages can share
/// the request plumbing and the seeded generator.
pub struct ClassOptimizer<'a> {
    pub class: &'a ClassSpec,
    pub table: &'a ClassTable,
    pub train: &'a DatasetSplit,
    pub backend: &'a dyn Backend,
    pub registry: &'a PromptRegistry,
    pub config: &'a OptimizerConfig,
    rng: ChaCha8Rng,
    pub trace: ClassTrace,
}

impl<'a> ClassOptimizer<'a> {
    pub fn new(
        class: &'a ClassSpec,
        table: &'a ClassTable,
        train: &'a DatasetSplit,
        backend: &'a dyn Backend,
        registry: &'a PromptRegistry,
        config: &'a OptimizerConfig,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class.id as u64 + 1),
        );
        let trace = ClassTrace::new(class.id, &class.name, config.seed, config.t_max);
        Self {
            class,
            table,
            train,
            backend,
            registry,
            config,
            rng,
            trace,
        }
    }

    fn system_prompt(&self) -> String {
        self.registry.template(TemplateId::System).text.clone()
    }

    fn call(
        &mut self,
        kind: RequestKind,
        request: &ChatRequest,
        note: Option<String>,
    ) -> Result<ChatResponse> {
        let hash = request.stable_hash();
        let response = self.backend.complete(request)?;
        self.trace.record_request(
            Phase::Optimization,
            kind,
            &hash,
            &response.text,
            &response.usage,
            response.latency_ms,
            note,
        );
        Ok(response)
    }

    /// Annotate and encode one image for a request payload.
    fn image_payload(
        &self,
        image: &ImageRecord,
        boxes: &[(BoundingBox, BoxColor)],
    ) -> Result<ImagePayload> {
        let bytes = image.load_bytes()?;
        let desc = self.backend.descriptor();
        let annotated = annotate::draw_boxes(&bytes, boxes, None)?;
        let encoded = annotate::encode_jpeg_capped(&annotated, desc.image_jpeg_quality, desc.image_max_side)?;
        Ok(ImagePayload {
            image_id: image.id,
            bytes: std::sync::Arc::new(encoded),
            mime: "image/jpeg".to_string(),
            annotations: boxes
                .iter()
                .map(|(bbox, color)| AnnotationSummary {
                    bbox: bbox.as_array(),
                    color: *color,
                })
                .collect(),
        })
    }

    fn detect_request(&self, prompt_text: &str, image: &ImageRecord) -> Result<ChatRequest> {
        let text = self.registry.render(
            TemplateId::DetpoDetect,
            &slot_map(&[
                ("class_name", &self.class.name),
                ("dataset_instructions", prompt_text),
            ]),
        )?;
        Ok(ChatRequest::new(self.system_prompt())
            .text(text)
            .image(self.image_payload(image, &[])?)
            .temperature(self.config.detect_temperature))
    }

    /// Run detection with `prompt_text` over every image of `split` and
    /// score the result for this class.
    pub fn evaluate_prompt(
        &mut self,
        prompt_text: &str,
        split: &DatasetSplit,
    ) -> Result<(Vec<Detection>, EvalResult)> {
        let mut detections = Vec::new();
        let image_ids = split.image_ids();
        for image_id in image_ids {
            let image = split.image(image_id).expect("iterating split ids");
            let request = self.detect_request(prompt_text, image)?;
            let response = self.backend.complete(&request)?;
            let parsed = parse_detections(
                &response.text,
                &self.backend.descriptor().coordinates,
                image,
                self.table,
            );
            let note = parsed.parse_failure.then(|| format!("parse-failure:image-{image_id}"));
            self.trace.record_request(
                Phase::Optimization,
                RequestKind::Detect,
                &request.stable_hash(),
                &response.text,
                &response.usage,
                response.latency_ms,
                note,
            );
            detections.extend(parsed.detections);
        }
        let eval = coco_map(&detections, split, &[self.class.id]);
        Ok((detections, eval))
    }

    fn sample<T: Copy>(&mut self, items: &[T]) -> Option<T> {
        if items.is_empty() {
            None
        } else {
            Some(items[self.rng.random_range(0..items.len())])
        }
    }

    /// A green-boxed positive example image: all instances of the class on
    /// one randomly sampled class-containing image.
    fn positive_example(&mut self) -> Result<ImagePayload> {
        let images = self.train.images_with_class(self.class.id);
        let image_id = self
            .sample(&images)
            .ok_or_else(|| Error::Dataset(format!("class {} has no training instances", self.class.name)))?;
        let image = self.train.image(image_id).expect("sampled from split");
        let boxes: Vec<(BoundingBox, BoxColor)> = self
            .train
            .ground_truths_on_image(image_id)
            .into_iter()
            .filter(|g| g.class_id == self.class.id)
            .map(|g| (g.bbox, BoxColor::Green))
            .collect();
        self.image_payload(image, &boxes)
    }

    /// Stage 1: summarize green-boxed positives into an initial definition,
    /// then refine it against one red-boxed negative per other class.
    pub fn stage1_bootstrap(&mut self) -> Result<String> {
        let positive_ids = self.train.images_with_class(self.class.id);
        if positive_ids.is_empty() {
            return Err(Error::Dataset(format!(
                "class {} has no training instances",
                self.class.name
            )));
        }

        let mut request = ChatRequest::new(self.system_prompt())
            .text(self.registry.render(TemplateId::InitSummarize, &BTreeMap::new())?)
            .temperature(self.config.refine_temperature);
        if !self.class.seed_description.trim().is_empty() {
            request = request.text(format!(
                "Seed description of the '{}' class: {}",
                self.class.name, self.class.seed_description
            ));
        }
        for image_id in &positive_ids {
            let image = self.train.image(*image_id).expect("split id");
            let boxes: Vec<(BoundingBox, BoxColor)> = self
                .train
                .ground_truths_on_image(*image_id)
                .into_iter()
                .filter(|g| g.class_id == self.class.id)
                .map(|g| (g.bbox, BoxColor::Green))
                .collect();
            request = request.image(self.image_payload(image, &boxes)?);
        }
        let response = self.call(RequestKind::Summarize, &request, None)?;
        let mut definition = response.text.trim().to_string();
        if definition.is_empty() {
            return Err(Error::EmptyDefinition);
        }

        let mut contrastive_steps = 0u32;
        let negatives: Vec<&ClassSpec> = self
            .table
            .iter()
            .filter(|c| c.id != self.class.id)
            .collect();
        for negative in negatives {
            let neg_images = self.train.images_with_class(negative.id);
            let Some(neg_image_id) = self.sample(&neg_images) else {
                continue; // other class absent from the training split
            };
            let neg_image = self.train.image(neg_image_id).expect("split id");
            let neg_boxes: Vec<BoundingBox> = self
                .train
                .ground_truths_on_image(neg_image_id)
                .into_iter()
                .filter(|g| g.class_id == negative.id)
                .map(|g| g.bbox)
                .collect();
            let Some(neg_box) = self.sample(&neg_boxes) else {
                continue;
            };
            let red = self.image_payload(neg_image, &[(neg_box, BoxColor::Red)])?;
            let green = self.positive_example()?;

            let text = self.registry.render(
                TemplateId::RefineContrastive,
                &slot_map(&[
                    ("class_name", &self.class.name),
                    ("current_instructions", &definition),
                ]),
            )?;
            let request = ChatRequest::new(self.system_prompt())
                .text(text)
                .image(green)
                .image(red)
                .temperature(self.config.refine_temperature);
            let response = self.call(RequestKind::Contrastive, &request, None)?;
            contrastive_steps += 1;
            match extract_definition(&response.text, &self.class.name) {
                Ok(extracted) => definition = extracted.definition,
                Err(_) => self.trace.push(TraceEvent::Note {
                    message: format!("contrastive step against '{}' skipped: no definition", negative.name),
                }),
            }
        }

        self.trace.push(TraceEvent::Stage1Complete {
            definition: definition.clone(),
            contrastive_steps,
        });
        Ok(definition)
    }

    /// One refinement request (include or exclude); returns the updated
    /// definition, retrying extraction once before giving up.
    fn refine_step(
        &mut self,
        template: TemplateId,
        kind: RequestKind,
        current: &str,
        green: &ImagePayload,
        colored: &ImagePayload,
    ) -> Result<Option<String>> {
        let text = self.registry.render(
            template,
            &slot_map(&[
                ("class_name", &self.class.name),
                ("current_instructions", current),
            ]),
        )?;
        let request = ChatRequest::new(self.system_prompt())
            .text(text)
            .image(green.clone())
            .image(colored.clone())
            .temperature(self.config.refine_temperature);
        for attempt in 0..=self.config.refinement_retries {
            let response = self.call(kind, &request, (attempt > 0).then(|| "retry".to_string()))?;
            if let Ok(extracted) = extract_definition(&response.text, &self.class.name) {
                return Ok(Some(extracted.definition));
            }
        }
        self.trace.push(TraceEvent::Note {
            message: format!("{kind:?} extraction failed; keeping current definition"),
        });
        Ok(None)
    }

    /// Stage 2: iterate detect -> mine errors -> refine (include the worst
    /// FN, then exclude the worst FP) -> re-evaluate, reverting whenever
    /// the new training mAP falls below the accepted one.
    pub fn stage2_refine(
        &mut self,
        stage1_prompt: &str,
    ) -> Result<(OptimizationState, Vec<PromptCandidate>)> {
        let (mut dets, mut eval) = self.evaluate_prompt(stage1_prompt, self.train)?;
        let mut state = OptimizationState {
            class_id: self.class.id,
            current: stage1_prompt.to_string(),
            best: stage1_prompt.to_string(),
            best_train_map: eval.dataset_map,
            accepted_train_map: eval.dataset_map,
            t: 0,
            t_max: self.config.t_max,
            exclusion: BTreeSet::new(),
        };
        let mut iteration_candidates = Vec::new();

        for t in 1..=self.config.t_max {
            if eval.is_perfect() {
                self.trace.push(TraceEvent::EarlyStop {
                    t,
                    reason: "training evaluation already perfect".into(),
                });
                break;
            }
            let worst =
                select_worst_errors(&eval, &dets, self.train, self.class.id, &state.exclusion);
            if worst.worst_fp.is_none() && worst.worst_fn.is_none() {
                self.trace.push(TraceEvent::EarlyStop {
                    t,
                    reason: "no selectable errors remain".into(),
                });
                break;
            }
            state.t = t;
            if let Some(record) = &worst.worst_fp {
                state.exclusion.insert(record.image_id);
            }
            if let Some(record) = &worst.worst_fn {
                state.exclusion.insert(record.image_id);
            }

            // Green exemplar: the best matched pair's ground truth box, or
            // a sampled positive when nothing has been detected correctly.
            let green = match &worst.best_match {
                Some(exemplar) => {
                    let image = self
                        .train
                        .image(exemplar.image_id)
                        .expect("exemplar image in split");
                    self.image_payload(image, &[(exemplar.ground_truth_bbox, BoxColor::Green)])?
                }
                None => self.positive_example()?,
            };

            let mut candidate = state.current.clone();
            if let Some(record) = &worst.worst_fn {
                let image = self.train.image(record.image_id).expect("split id");
                let blue = self.image_payload(image, &[(record.bbox, BoxColor::Blue)])?;
                if let Some(updated) = self.refine_step(
                    TemplateId::RefineIncludeFn,
                    RequestKind::RefineInclude,
                    &candidate,
                    &green,
                    &blue,
                )? {
                    candidate = updated;
                }
            }
            if let Some(record) = &worst.worst_fp {
                let image = self.train.image(record.image_id).expect("split id");
                let red = self.image_payload(image, &[(record.bbox, BoxColor::Red)])?;
                if let Some(updated) = self.refine_step(
                    TemplateId::RefineExcludeFp,
                    RequestKind::RefineExclude,
                    &candidate,
                    &green,
                    &red,
                )? {
                    candidate = updated;
                }
            }

            let (new_dets, new_eval) = self.evaluate_prompt(&candidate, self.train)?;
            let evaluated_map = new_eval.dataset_map;
            iteration_candidates.push(PromptCandidate {
                class_id: self.class.id,
                text: candidate.clone(),
                provenance: Provenance::Iteration(t),
                train_map: Some(evaluated_map),
                val_map: None,
            });

            let action = if evaluated_map < state.accepted_train_map {
                IterationAction::Revert
            } else {
                state.current = candidate;
                state.accepted_train_map = evaluated_map;
                dets = new_dets;
                eval = new_eval;
                IterationAction::Accept
            };
            if state.accepted_train_map > state.best_train_map {
                state.best = state.current.clone();
                state.best_train_map = state.accepted_train_map;
            }
            self.trace.push(TraceEvent::Iteration {
                t,
                action,
                evaluated_map,
                accepted_map: state.accepted_train_map,
                best_map: state.best_train_map,
                worst_fp: worst.worst_fp,
                worst_fn: worst.worst_fn,
                exclusion_size: state.exclusion.len(),
            });
        }

        Ok((state, iteration_candidates))
    }

    /// Stage 3: add a text-only alternative, evaluate each distinct
    /// candidate on the validation split, pick the argmax (ties by
    /// provenance priority). Returns the winner plus the evaluated pool.
    pub fn stage3_select(
        &mut self,
        mut candidates: Vec<PromptCandidate>,
        val: &DatasetSplit,
    ) -> Result<(PromptCandidate, Vec<PromptCandidate>)> {
        let best_text = candidates
            .iter()
            .find(|c| c.provenance == Provenance::Best)
            .map(|c| c.text.clone());
        if let Some(best_text) = best_text {
            if let Some(alt) = self.generate_alternative(&best_text)? {
                candidates.push(alt);
            }
        }

        let mut pool: Vec<PromptCandidate> = candidates
            .into_iter()
            .filter(|c| !c.text.trim().is_empty())
            .collect();
        if pool.is_empty() {
            return Err(Error::Dataset("no non-empty candidate prompts".into()));
        }

        if val.num_images() == 0 {
            self.trace.push(TraceEvent::Note {
                message: "validation split empty; keeping best training prompt".into(),
            });
            let fallback = pool
                .iter()
                .max_by_key(|c| c.provenance.priority())
                .expect("pool not empty")
                .clone();
            return Ok((fallback, pool));
        }

        // Evaluate each distinct text once, in candidate order.
        let mut val_maps: BTreeMap<String, f64> = BTreeMap::new();
        for candidate in &pool {
            if val_maps.contains_key(&candidate.text) {
                continue;
            }
            let (_, eval) = self.evaluate_prompt(&candidate.text, val)?;
            val_maps.insert(candidate.text.clone(), eval.dataset_map);
        }
        for candidate in &mut pool {
            candidate.val_map = val_maps.get(&candidate.text).copied();
            self.trace.push(TraceEvent::CandidateEval {
                provenance: candidate.provenance.label(),
                val_map: candidate.val_map.unwrap_or(0.0),
            });
        }

        let selected = pool
            .iter()
            .max_by(|a, b| {
                let va = a.val_map.unwrap_or(0.0);
                let vb = b.val_map.unwrap_or(0.0);
                va.partial_cmp(&vb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.provenance.priority().cmp(&b.provenance.priority()))
            })
            .expect("pool not empty")
            .clone();
        self.trace.push(TraceEvent::Selected {
            provenance: selected.provenance.label(),
            val_map: selected.val_map.unwrap_or(0.0),
        });
        Ok((selected, pool))
    }

    fn generate_alternative(&mut self, best_text: &str) -> Result<Option<PromptCandidate>> {
        let text = self.registry.render(
            TemplateId::GenerateAlternative,
            &slot_map(&[
                ("class_name", &self.class.name),
                ("best_instructions", best_text),
            ]),
        )?;
        let request = ChatRequest::new(self.system_prompt())
            .text(text)
            .temperature(self.config.refine_temperature);
        for attempt in 0..=self.config.refinement_retries {
            let response = self.call(
                RequestKind::Alternative,
                &request,
                (attempt > 0).then(|| "retry".to_string()),
            )?;
            if let Ok(extracted) = extract_definition(&response.text, &self.class.name) {
                return Ok(Some(PromptCandidate {
                    class_id: self.class.id,
                    text: extracted.definition,
                    provenance: Provenance::Alternative,
                    train_map: None,
                    val_map: None,
                }));
            }
        }
        self.trace.push(TraceEvent::Note {
            message: "alternative generation produced no definition".into(),
        });
        Ok(None)
    }

    /// Run all three stages for this class.
    pub fn run(mut self, val: &DatasetSplit) -> Result<ClassOutcome> {
        let stage1 = self.stage1_bootstrap()?;
        let (state, _iterations) = self.stage2_refine(&stage1)?;

        let candidates = vec![
            PromptCandidate {
                class_id: self.class.id,
                text: self.class.seed_description.clone(),
                provenance: Provenance::Seed,
                train_map: None,
                val_map: None,
            },
            PromptCandidate {
                class_id: self.class.id,
                text: stage1,
                provenance: Provenance::Stage1,
                train_map: None,
                val_map: None,
            },
            PromptCandidate {
                class_id: self.class.id,
                text: state.best.clone(),
                provenance: Provenance::Best,
                train_map: Some(state.best_train_map),
                val_map: None,
            },
            PromptCandidate {
                class_id: self.class.id,
                text: state.current.clone(),
                provenance: Provenance::Final,
                train_map: Some(state.accepted_train_map),
                val_map: None,
            },
        ];

        let (selected, pool) = self.stage3_select(candidates, val)?;
        Ok(ClassOutcome {
            class_id: self.class.id,
            class_name: self.class.name.clone(),
            selected,
            candidates: pool,
            trace: self.trace,
            failed: false,
        })
    }
}

/// Optimize every class of the dataset independently. Classes with no
/// training instances, and classes whose optimization fails, fall back to
/// their seed description with the failure recorded in the trace.
pub fn optimize_dataset(
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    table: &ClassTable,
    config: &OptimizerConfig,
    backend: &dyn Backend,
    registry: &PromptRegistry,
    jobs: usize,
) -> DatasetOutcome {
    let train_owned;
    let train = match config.k_shot {
        Some(k) => {
            train_owned = subsample_k_shot(train, k, config.seed, table);
            &train_owned
        }
        None => train,
    };
    let val = val.unwrap_or(train);

    let run_class = |class: &ClassSpec| -> ClassOutcome {
        if train.class_instance_count(class.id) == 0 {
            let mut trace = ClassTrace::new(class.id, &class.name, config.seed, config.t_max);
            trace.push(TraceEvent::ClassFailed {
                error: "no training instances".into(),
                fallback: "seed description".into(),
            });
            return fallback_outcome(class, trace);
        }
        let optimizer = ClassOptimizer::new(class, table, train, backend, registry, config);
        // Hold a copy of the trace head in case of mid-run failure.
        match optimizer.run(val) {
            Ok(outcome) => outcome,
            Err(err) => {
                let mut trace = ClassTrace::new(class.id, &class.name, config.seed, config.t_max);
                trace.push(TraceEvent::ClassFailed {
                    error: err.to_string(),
                    fallback: "seed description".into(),
                });
                fallback_outcome(class, trace)
            }
        }
    };

    let classes: Vec<&ClassSpec> = table.iter().collect();
    let outcomes: Vec<ClassOutcome> = if jobs <= 1 || classes.len() <= 1 {
        classes.iter().map(|c| run_class(c)).collect()
    } else {
        let run_class = &run_class;
        std::thread::scope(|scope| {
            let handles: Vec<_> = classes
                .iter()
                .map(|&class| scope.spawn(move || run_class(class)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("class worker")).collect()
        })
    };

    DatasetOutcome { classes: outcomes }
}

fn fallback_outcome(class: &ClassSpec, trace: ClassTrace) -> ClassOutcome {
    ClassOutcome {
        class_id: class.id,
        class_name: class.name.clone(),
        selected: PromptCandidate {
            class_id: class.id,
            text: class.seed_description.clone(),
            provenance: Provenance::Seed,
            train_map: None,
            val_map: None,
        },
        candidates: Vec::new(),
        trace,
        failed: true,
    }
}
