//! Append-only audit log of an optimization run, one JSON object per line.
//!
//! The first line is the only place a wall-clock timestamp appears, so two
//! runs with identical seeds and scripts differ at most in that line.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Usage;
use crate::mining::ErrorRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Optimization,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    Summarize,
    Contrastive,
    Detect,
    RefineInclude,
    RefineExclude,
    Alternative,
    VqaScore,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TraceEvent {
    Header {
        class_id: u32,
        class_name: String,
        seed: u64,
        t_max: u32,
        unix_time: u64,
    },
    Request {
        phase: Phase,
        kind: RequestKind,
        request_hash: String,
        response_hash: String,
        prompt_tokens: u64,
        completion_tokens: u64,
        latency_ms: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Stage1Complete {
        definition: String,
        contrastive_steps: u32,
    },
    Iteration {
        t: u32,
        action: IterationAction,
        evaluated_map: f64,
        accepted_map: f64,
        best_map: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        worst_fp: Option<ErrorRecord>,
        #[serde(skip_serializing_if = "Option::is_none")]
        worst_fn: Option<ErrorRecord>,
        exclusion_size: usize,
    },
    EarlyStop {
        t: u32,
        reason: String,
    },
    CandidateEval {
        provenance: String,
        val_map: f64,
    },
    Selected {
        provenance: String,
        val_map: f64,
    },
    ClassFailed {
        error: String,
        fallback: String,
    },
    Note {
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationAction {
    Accept,
    Revert,
}

pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct ClassTrace {
    pub class_id: u32,
    pub class_name: String,
    pub events: Vec<TraceEvent>,
}

impl ClassTrace {
    pub fn new(class_id: u32, class_name: &str, seed: u64, t_max: u32) -> Self {
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            class_id,
            class_name: class_name.to_string(),
            events: vec![TraceEvent::Header {
                class_id,
                class_name: class_name.to_string(),
                seed,
                t_max,
                unix_time,
            }],
        }
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn record_request(
        &mut self,
        phase: Phase,
        kind: RequestKind,
        request_hash: &str,
        response_text: &str,
        usage: &Usage,
        latency_ms: u64,
        note: Option<String>,
    ) {
        self.push(TraceEvent::Request {
            phase,
            kind,
            request_hash: request_hash.to_string(),
            response_hash: text_hash(response_text),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_ms,
            note,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("trace events always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn total_usage(&self) -> Usage {
        let mut usage = Usage::default();
        for event in &self.events {
            if let TraceEvent::Request {
                prompt_tokens,
                completion_tokens,
                ..
            } = event
            {
                usage.prompt_tokens += prompt_tokens;
                usage.completion_tokens += completion_tokens;
            }
        }
        usage
    }

    pub fn request_count(&self, kind: RequestKind) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Request { kind: k, .. } if *k == kind))
            .count()
    }

    pub fn revert_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Iteration { action: IterationAction::Revert, .. }))
            .count()
    }

    /// Accepted training-mAP series by iteration (Fig-4 style data).
    pub fn accepted_map_series(&self) -> Vec<(u32, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Iteration { t, accepted_map, .. } => Some((*t, *accepted_map)),
                _ => None,
            })
            .collect()
    }
}
