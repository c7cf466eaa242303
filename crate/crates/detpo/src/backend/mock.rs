//! Deterministic scripted backend for tests and offline runs.
//!
//! Responses come from a script: a map from request hash to entry, an
//! ordered sequence consumed one entry per request, or a default entry.
//! Hash-keyed scripts make the mock a pure function of the request hash,
//! which is what end-to-end determinism tests rely on. Every served
//! response is also recorded, so a run against a sequence or responder can
//! be dumped back out as a hash-keyed script for exact replay.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, ChatRequest, ChatResponse, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl MockEntry {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn with_yes_no(text: impl Into<String>, p_yes: f64, p_no: f64) -> Self {
        let mut table = BTreeMap::new();
        if p_yes > 0.0 {
            table.insert("Yes".to_string(), p_yes.ln());
        }
        if p_no > 0.0 {
            table.insert("No".to_string(), p_no.ln());
        }
        Self {
            text: text.into(),
            top_logprobs: Some(table),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    /// Request-hash keyed responses.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub responses: BTreeMap<String, MockEntry>,
    /// Fallback tape consumed in request order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sequence: Vec<MockEntry>,
    /// Last-resort response for unscripted requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockEntry>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// One entry of the call log kept for request-count assertions.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub hash: String,
    pub system: String,
    pub text: String,
    pub image_ids: Vec<u64>,
    pub want_logprobs: bool,
}

type Responder = Box<dyn Fn(&ChatRequest) -> Option<MockEntry> + Send + Sync>;

pub struct MockBackend {
    descriptor: BackendDescriptor,
    script: MockScript,
    cursor: Mutex<usize>,
    responder: Option<Responder>,
    log: Mutex<Vec<CallRecord>>,
    served: Mutex<BTreeMap<String, MockEntry>>,
}

impl MockBackend {
    pub fn new(descriptor: BackendDescriptor, script: MockScript) -> Self {
        Self {
            descriptor,
            script,
            cursor: Mutex::new(0),
            responder: None,
            log: Mutex::new(Vec::new()),
            served: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn from_script_file(descriptor: BackendDescriptor, path: &Path) -> Result<Self> {
        Ok(Self::new(descriptor, MockScript::load(path)?))
    }

    pub fn with_default(descriptor: BackendDescriptor, entry: MockEntry) -> Self {
        Self::new(
            descriptor,
            MockScript {
                default: Some(entry),
                ..Default::default()
            },
        )
    }

    /// Script responses with a closure over the request (test-side only;
    /// the file format stays hash/sequence/default).
    pub fn with_responder<F>(descriptor: BackendDescriptor, responder: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<MockEntry> + Send + Sync + 'static,
    {
        let mut backend = Self::new(descriptor, MockScript::default());
        backend.responder = Some(Box::new(responder));
        backend
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    /// Everything served so far, keyed by request hash: a replayable script.
    pub fn dump_script(&self) -> MockScript {
        MockScript {
            responses: self.served.lock().unwrap().clone(),
            sequence: Vec::new(),
            default: None,
        }
    }

    fn lookup(&self, request: &ChatRequest, hash: &str) -> Result<MockEntry> {
        if let Some(responder) = &self.responder {
            if let Some(entry) = responder(request) {
                return Ok(entry);
            }
        }
        if let Some(entry) = self.script.responses.get(hash) {
            return Ok(entry.clone());
        }
        {
            let mut cursor = self.cursor.lock().unwrap();
            if *cursor < self.script.sequence.len() {
                let entry = self.script.sequence[*cursor].clone();
                *cursor += 1;
                return Ok(entry);
            }
        }
        if let Some(entry) = &self.script.default {
            return Ok(entry.clone());
        }
        Err(Error::Unscripted(hash.to_string()))
    }
}

/// Deterministic token estimate used when a script entry does not pin
/// usage explicitly: four characters per text token plus a flat per-image
/// charge.
fn estimate_prompt_tokens(request: &ChatRequest) -> u64 {
    let chars = request.system.len() + request.text_parts().len();
    (chars as u64).div_ceil(4) + 256 * request.image_ids().len() as u64
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let hash = request.stable_hash();
        self.log.lock().unwrap().push(CallRecord {
            hash: hash.clone(),
            system: request.system.clone(),
            text: request.text_parts(),
            image_ids: request.image_ids(),
            want_logprobs: request.want_logprobs,
        });

        let entry = self.lookup(request, &hash)?;
        let resolved = MockEntry {
            prompt_tokens: Some(entry.prompt_tokens.unwrap_or_else(|| estimate_prompt_tokens(request))),
            completion_tokens: Some(
                entry
                    .completion_tokens
                    .unwrap_or_else(|| (entry.text.len() as u64).div_ceil(4)),
            ),
            latency_ms: Some(entry.latency_ms.unwrap_or(0)),
            ..entry
        };
        self.served.lock().unwrap().insert(hash, resolved.clone());

        Ok(ChatResponse {
            text: resolved.text,
            top_logprobs: resolved.top_logprobs,
            usage: Usage {
                prompt_tokens: resolved.prompt_tokens.unwrap_or(0),
                completion_tokens: resolved.completion_tokens.unwrap_or(0),
            },
            latency_ms: resolved.latency_ms.unwrap_or(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_keyed_lookup_is_pure() {
        let req = ChatRequest::new("sys").text("hello");
        let mut script = MockScript::default();
        script
            .responses
            .insert(req.stable_hash(), MockEntry::text_only("hi"));
        let backend = MockBackend::new(BackendDescriptor::mock("m"), script);
        assert_eq!(backend.complete(&req).unwrap().text, "hi");
        assert_eq!(backend.complete(&req).unwrap().text, "hi");
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn sequence_consumes_in_order() {
        let script = MockScript {
            sequence: vec![MockEntry::text_only("a"), MockEntry::text_only("b")],
            ..Default::default()
        };
        let backend = MockBackend::new(BackendDescriptor::mock("m"), script);
        let req = ChatRequest::new("s").text("x");
        assert_eq!(backend.complete(&req).unwrap().text, "a");
        assert_eq!(backend.complete(&req).unwrap().text, "b");
        assert!(matches!(
            backend.complete(&req).unwrap_err(),
            Error::Unscripted(_)
        ));
    }

    #[test]
    fn dump_script_replays_identically() {
        let backend = MockBackend::with_responder(BackendDescriptor::mock("m"), |req| {
            Some(MockEntry::text_only(format!("echo:{}", req.text_parts().trim())))
        });
        let req1 = ChatRequest::new("s").text("one");
        let req2 = ChatRequest::new("s").text("two");
        let r1 = backend.complete(&req1).unwrap();
        let r2 = backend.complete(&req2).unwrap();

        let replay = MockBackend::new(BackendDescriptor::mock("m"), backend.dump_script());
        let p1 = replay.complete(&req1).unwrap();
        let p2 = replay.complete(&req2).unwrap();
        assert_eq!(r1.text, p1.text);
        assert_eq!(r2.text, p2.text);
        assert_eq!(r1.usage, p1.usage);
    }

    #[test]
    fn token_estimates_are_deterministic() {
        let backend = MockBackend::with_default(BackendDescriptor::mock("m"), MockEntry::text_only("abcdefgh"));
        let req = ChatRequest::new("12345678").text("1234");
        let a = backend.complete(&req).unwrap();
        let b = backend.complete(&req).unwrap();
        assert_eq!(a.usage, b.usage);
        assert_eq!(a.usage.prompt_tokens, 3 + 1); // 8 sys chars + "1234\n"
        assert_eq!(a.usage.completion_tokens, 2);
    }
}
