//! Chat-completions-style HTTP backend with retries and rate limiting.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, ChatRequest, ChatResponse, ContentPart, Usage};
use crate::error::{Error, Result};

/// Serializes request pacing across threads; the one shared synchronized
/// piece of the backend.
struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(requests_per_minute: u32) -> Self {
        Self {
            min_interval: Duration::from_secs_f64(60.0 / requests_per_minute.max(1) as f64),
            last: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut last = self.last.lock().unwrap();
            let now = Instant::now();
            let wait = match *last {
                Some(prev) => self.min_interval.saturating_sub(now.duration_since(prev)),
                None => Duration::ZERO,
            };
            *last = Some(now + wait);
            wait
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct HttpBackend {
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limiter: Option<RateLimiter>,
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self> {
        let api_key = match &descriptor.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("API key environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        let limiter = descriptor.requests_per_minute.map(RateLimiter::new);
        Ok(Self {
            descriptor,
            client,
            api_key,
            limiter,
        })
    }

    fn body_for(&self, request: &ChatRequest) -> Value {
        let mut content = Vec::new();
        for part in &request.parts {
            match part {
                ContentPart::Text(text) => content.push(json!({"type": "text", "text": text})),
                ContentPart::Image(img) => {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(img.bytes.as_slice());
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{}", img.mime, b64)}
                    }));
                }
            }
        }
        let mut body = json!({
            "model": self.descriptor.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": content}
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(20);
        }
        body
    }

    fn parse_response(&self, status: u16, body: &str, latency_ms: u64) -> Result<ChatResponse> {
        match status {
            200 => {}
            401 | 403 => return Err(Error::Authentication(format!("status {status}"))),
            413 => return Err(Error::PayloadTooLarge(format!("status {status}"))),
            s => return Err(Error::Backend(format!("status {s}: {body}"))),
        }
        let value: Value = serde_json::from_str(body)?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| Error::Backend("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let top_logprobs = choice
            .pointer("/logprobs/content/0/top_logprobs")
            .and_then(|v| v.as_array())
            .map(|entries| {
                entries
                    .iter()
                    .filter_map(|e| {
                        let token = e.get("token")?.as_str()?.to_string();
                        let logprob = e.get("logprob")?.as_f64()?;
                        Some((token, logprob))
                    })
                    .collect()
            });
        let usage = Usage {
            prompt_tokens: value
                .pointer("/usage/prompt_tokens")
                .and_then(|v| v.as_u64())
                .unwrap_or(0),
            completion_tokens: value
                .pointer("/usage/completion_tokens")
                .and_then(|v| v.as_u64())
                .unwrap_or(0),
        };
        Ok(ChatResponse {
            text,
            top_logprobs,
            usage,
            latency_ms,
        })
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || status >= 500
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let body = self.body_for(request);
        let policy = &self.descriptor.retry;
        let mut backoff = Duration::from_millis(policy.initial_backoff_ms);
        let mut last_error = String::new();

        for attempt in 0..=policy.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(policy.max_backoff_ms));
            }
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }

            let started = Instant::now();
            let mut req = self
                .client
                .post(&self.descriptor.endpoint)
                .header("content-type", "application/json")
                .json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().unwrap_or_default();
                    let latency_ms = started.elapsed().as_millis() as u64;
                    if retryable_status(status) {
                        last_error = format!("status {status}");
                        continue;
                    }
                    return self.parse_response(status, &text, latency_ms);
                }
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            }
        }
        Err(Error::RetriesExhausted {
            attempts: policy.max_retries,
            last: last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Minimal canned-response HTTP server for exercising the client.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_clone = hits.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                hits_clone.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut payload = vec![0u8; content_length];
                reader.read_exact(&mut payload).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), hits, handle)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"content": text}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5}
        })
        .to_string()
    }

    fn descriptor(endpoint: String, max_retries: u32) -> BackendDescriptor {
        let mut d = BackendDescriptor::mock("live");
        d.endpoint = endpoint;
        d.retry = crate::backend::RetryPolicy {
            max_retries,
            initial_backoff_ms: 1,
            max_backoff_ms: 4,
        };
        d
    }

    #[test]
    fn successful_completion_parses_text_and_usage() {
        let (endpoint, _, handle) = serve(vec![(200, ok_body("hello"))]);
        let backend = HttpBackend::new(descriptor(endpoint, 0)).unwrap();
        let resp = backend.complete(&ChatRequest::new("s").text("q")).unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(resp.usage.prompt_tokens, 10);
        handle.join().unwrap();
    }

    #[test]
    fn transient_failures_retry_then_succeed() {
        let (endpoint, hits, handle) = serve(vec![
            (500, "oops".into()),
            (429, "slow down".into()),
            (200, ok_body("recovered")),
        ]);
        let backend = HttpBackend::new(descriptor(endpoint, 3)).unwrap();
        let resp = backend.complete(&ChatRequest::new("s").text("q")).unwrap();
        assert_eq!(resp.text, "recovered");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        handle.join().unwrap();
    }

    #[test]
    fn retry_budget_exhausts_after_max_retries() {
        // budget 2 means 3 total attempts; all fail.
        let (endpoint, hits, handle) = serve(vec![
            (500, "a".into()),
            (500, "b".into()),
            (500, "c".into()),
        ]);
        let backend = HttpBackend::new(descriptor(endpoint, 2)).unwrap();
        let err = backend.complete(&ChatRequest::new("s").text("q")).unwrap_err();
        assert!(matches!(err, Error::RetriesExhausted { attempts: 2, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        handle.join().unwrap();
    }

    #[test]
    fn authentication_failures_do_not_retry() {
        let (endpoint, hits, handle) = serve(vec![(401, "denied".into())]);
        let backend = HttpBackend::new(descriptor(endpoint, 3)).unwrap();
        let err = backend.complete(&ChatRequest::new("s").text("q")).unwrap_err();
        assert!(matches!(err, Error::Authentication(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        handle.join().unwrap();
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let (endpoint, _, handle) = serve(vec![(200, ok_body("a")), (200, ok_body("b"))]);
        let mut desc = descriptor(endpoint, 0);
        desc.requests_per_minute = Some(1200); // 50ms interval
        let backend = HttpBackend::new(desc).unwrap();
        let started = Instant::now();
        backend.complete(&ChatRequest::new("s").text("1")).unwrap();
        backend.complete(&ChatRequest::new("s").text("2")).unwrap();
        assert!(started.elapsed() >= Duration::from_millis(50));
        handle.join().unwrap();
    }

    #[test]
    fn missing_api_key_env_is_a_config_error() {
        let mut desc = descriptor("http://127.0.0.1:1".into(), 0);
        desc.api_key_env = Some("DETPO_TEST_KEY_THAT_DOES_NOT_EXIST".into());
        let err = match HttpBackend::new(desc) {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn logprob_table_parses_from_choice() {
        let body = serde_json::json!({
            "choices": [{
                "message": {"content": "Yes"},
                "logprobs": {"content": [{
                    "token": "Yes",
                    "logprob": -0.2,
                    "top_logprobs": [
                        {"token": "Yes", "logprob": -0.2},
                        {"token": "No", "logprob": -1.8}
                    ]
                }]}
            }],
            "usage": {"prompt_tokens": 4, "completion_tokens": 1}
        })
        .to_string();
        let (endpoint, _, handle) = serve(vec![(200, body)]);
        let backend = HttpBackend::new(descriptor(endpoint, 0)).unwrap();
        let resp = backend
            .complete(&ChatRequest::new("s").text("q").logprobs(true))
            .unwrap();
        let table = resp.top_logprobs.unwrap();
        assert_eq!(table.len(), 2);
        assert!((table["Yes"] - (-0.2)).abs() < 1e-12);
        handle.join().unwrap();
    }
}
