//! Uniform access to multimodal chat models: live HTTP backends and a
//! deterministic scripted mock behind one trait.

mod http;
mod mock;
mod parse;

pub use http::HttpBackend;
pub use mock::{CallRecord, MockBackend, MockEntry, MockScript};
pub use parse::{parse_detections, serialize_detections, ParsedDetections};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::BoxColor;
use crate::error::{Error, Result};
use crate::geometry::{CoordinateSpace, CornerOrder, SpaceKind};

/// Which convention a backend's detection output uses. Pixel conventions
/// resolve against each image's own dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scale", rename_all = "kebab-case")]
pub enum CoordinateConvention {
    Pixel { order: CornerOrder },
    PerMille { order: CornerOrder },
}

impl CoordinateConvention {
    pub fn space_for(&self, width: f64, height: f64) -> Result<CoordinateSpace> {
        match self {
            CoordinateConvention::Pixel { order } => {
                Ok(CoordinateSpace::pixel(width, height)?.with_order(*order))
            }
            CoordinateConvention::PerMille { order } => Ok(CoordinateSpace {
                kind: SpaceKind::PerMille,
                order: *order,
            }),
        }
    }
}

impl Default for CoordinateConvention {
    fn default() -> Self {
        CoordinateConvention::Pixel {
            order: CornerOrder::Xyxy,
        }
    }
}

/// A box drawn onto a request image, kept alongside the pixels so that
/// request hashing can key on geometry instead of raw image bytes.
#[derive(Debug, Clone, Serialize)]
pub struct AnnotationSummary {
    pub bbox: [f64; 4],
    pub color: BoxColor,
}

#[derive(Debug, Clone)]
pub struct ImagePayload {
    pub image_id: u64,
    pub bytes: Arc<Vec<u8>>,
    pub mime: String,
    pub annotations: Vec<AnnotationSummary>,
}

#[derive(Debug, Clone)]
pub enum ContentPart {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system: String,
    pub parts: Vec<ContentPart>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub want_logprobs: bool,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            parts: Vec::new(),
            temperature: 0.0,
            max_output_tokens: 2048,
            want_logprobs: false,
        }
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.parts.push(ContentPart::Text(text.into()));
        self
    }

    pub fn image(mut self, payload: ImagePayload) -> Self {
        self.parts.push(ContentPart::Image(payload));
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn text_parts(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            if let ContentPart::Text(t) = part {
                out.push_str(t);
                out.push('\n');
            }
        }
        out
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Image(img) => Some(img.image_id),
                _ => None,
            })
            .collect()
    }

    /// Stable identity of a request: system text, concatenated text parts,
    /// image ids, and the annotation summary. Raw pixels are deliberately
    /// excluded so mock scripts stay human-writable.
    pub fn stable_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"system:");
        hasher.update(self.system.as_bytes());
        hasher.update(b"\n");
        for part in &self.parts {
            match part {
                ContentPart::Text(t) => {
                    hasher.update(b"text:");
                    hasher.update(t.as_bytes());
                    hasher.update(b"\n");
                }
                ContentPart::Image(img) => {
                    hasher.update(format!("image:{}\n", img.image_id).as_bytes());
                    for ann in &img.annotations {
                        let q = ann.bbox.map(|v| (v * 10.0).round() / 10.0);
                        hasher.update(
                            format!(
                                "ann:{:?}:{},{},{},{}\n",
                                ann.color, q[0], q[1], q[2], q[3]
                            )
                            .as_bytes(),
                        );
                    }
                }
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn add(&mut self, other: &Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    /// Top-token log probabilities for the first generated token, when the
    /// backend exposes them.
    pub top_logprobs: Option<BTreeMap<String, f64>>,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub coordinates: CoordinateConvention,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Requests per minute; absent means unthrottled.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_jpeg_quality")]
    pub image_jpeg_quality: u8,
    #[serde(default = "default_max_side")]
    pub image_max_side: u32,
}

fn default_jpeg_quality() -> u8 {
    90
}

fn default_max_side() -> u32 {
    1536
}

impl BackendDescriptor {
    pub fn mock(name: &str) -> Self {
        Self {
            name: name.to_string(),
            endpoint: String::new(),
            model: "mock".to_string(),
            coordinates: CoordinateConvention::default(),
            supports_logprobs: true,
            retry: RetryPolicy::default(),
            requests_per_minute: None,
            api_key_env: None,
            image_jpeg_quality: default_jpeg_quality(),
            image_max_side: default_max_side(),
        }
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

fn is_token_variant(token: &str, word: &str) -> bool {
    token.trim_start().eq_ignore_ascii_case(word)
}

/// Send a logprob-bearing request and read unnormalized yes/no
/// probabilities off the first generated token's top-logprob table.
/// Case and leading-whitespace token variants are summed. Normalization
/// happens downstream in calibration.
pub fn yes_no_probability(backend: &dyn Backend, request: &ChatRequest) -> Result<(f64, f64)> {
    if !backend.descriptor().supports_logprobs {
        return Err(Error::Capability(format!(
            "backend {} does not expose token log probabilities",
            backend.descriptor().name
        )));
    }
    let mut req = request.clone();
    req.want_logprobs = true;
    let response = backend.complete(&req)?;
    let table = response.top_logprobs.ok_or_else(|| {
        Error::Backend("response carried no top-logprob table".to_string())
    })?;

    let mut p_yes = 0.0;
    let mut p_no = 0.0;
    let mut seen_variant = false;
    for (token, logprob) in &table {
        if is_token_variant(token, "yes") {
            p_yes += logprob.exp();
            seen_variant = true;
        } else if is_token_variant(token, "no") {
            p_no += logprob.exp();
            seen_variant = true;
        }
    }
    if !seen_variant {
        return Err(Error::Backend(
            "neither a Yes nor a No token variant appears in the logprob table".to_string(),
        ));
    }
    Ok((p_yes, p_no))
}
