//! Chat-completion HTTP/JSON backend.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{count_tokens_fallback, Backend, CompletionRequest, CompletionResponse, GatewayError, TokenUsage};

/// Sampling knobs beyond the minimal chat-completion schema.
const EXTENSION_FIELDS: [&str; 9] = [
    "top_k",
    "typical_p",
    "repetition_penalty",
    "min_length",
    "num_beams",
    "early_stopping",
    "truncation_length",
    "add_bos_token",
    "skip_special_tokens",
];

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after_ms: Option<u64>,
}

/// Sends one JSON POST. Injected so tests can count or script network calls.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, GatewayError>;
}

#[derive(Debug, Clone, Default)]
pub struct ReqwestTransport {
    client: reqwest::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

#[async_trait]
impl Transport for ReqwestTransport {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, GatewayError> {
        let mut req = self.client.post(url).json(body).timeout(timeout);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout {
                    after_ms: timeout.as_millis() as u64,
                }
            } else {
                GatewayError::Transport {
                    attempts: 1,
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status().as_u16();
        let retry_after_ms = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(|secs| (secs * 1000.0) as u64);
        let body = resp.text().await.map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        Ok(HttpReply {
            status,
            body,
            retry_after_ms,
        })
    }
}

/// Builds the request body. Extension fields are included when `extensions` is set.
pub fn build_request_body(req: &CompletionRequest, remote_model: &str, extensions: bool) -> Value {
    let mut messages = Vec::new();
    if let Some(system) = &req.system_instruction {
        messages.push(json!({"role": "system", "content": system}));
    }
    messages.push(json!({"role": "user", "content": req.user_content}));
    let p = &req.params;
    let mut body = json!({
        "model": remote_model,
        "messages": messages,
        "temperature": p.temperature,
        "top_p": p.top_p,
        "max_tokens": p.max_tokens,
    });
    let obj = body.as_object_mut().expect("object literal");
    // a negative seed means "let the backend pick"
    if p.seed >= 0 {
        obj.insert("seed".into(), json!(p.seed));
    }
    if extensions {
        obj.insert("top_k".into(), json!(p.top_k));
        obj.insert("typical_p".into(), json!(p.typical_p));
        obj.insert("repetition_penalty".into(), json!(p.repetition_penalty));
        obj.insert("min_length".into(), json!(p.min_length));
        obj.insert("num_beams".into(), json!(p.num_beams));
        obj.insert("early_stopping".into(), json!(p.early_stopping));
        obj.insert("truncation_length".into(), json!(p.truncation_length));
        obj.insert("add_bos_token".into(), json!(p.add_bos_token));
        obj.insert("skip_special_tokens".into(), json!(p.skip_special_tokens));
    }
    body
}

/// Extracts the first choice's content and, when present, the usage counts.
pub fn parse_response_body(body: &str) -> Result<(String, Option<TokenUsage>), GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GatewayError::Decode("missing choices[0].message.content".into()))?;
    let content = match content {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => return Err(GatewayError::Decode(format!("content is not a string: {other}"))),
    };
    let usage = v.get("usage").and_then(|u| {
        let prompt = u.get("prompt_tokens")?.as_u64()?;
        let completion = u.get("completion_tokens")?.as_u64()?;
        Some(TokenUsage {
            prompt_tokens: prompt,
            completion_tokens: completion,
            approximate: false,
        })
    });
    Ok((content, usage))
}

pub struct HttpBackend {
    id: String,
    url: String,
    remote_model: String,
    api_key: Option<String>,
    extensions: AtomicBool,
    transport: Arc<dyn Transport>,
}

impl HttpBackend {
    pub fn new(
        id: impl Into<String>,
        url: impl Into<String>,
        remote_model: impl Into<String>,
        api_key: Option<String>,
        extensions: bool,
        transport: Arc<dyn Transport>,
    ) -> Self {
        HttpBackend {
            id: id.into(),
            url: url.into(),
            remote_model: remote_model.into(),
            api_key,
            extensions: AtomicBool::new(extensions),
            transport,
        }
    }

    async fn post(&self, req: &CompletionRequest, extensions: bool, timeout: Duration) -> Result<HttpReply, GatewayError> {
        let body = build_request_body(req, &self.remote_model, extensions);
        self.transport
            .post_json(&self.url, self.api_key.as_deref(), &body, timeout)
            .await
    }

    fn rejects_extensions(reply: &HttpReply) -> bool {
        (reply.status == 400 || reply.status == 422) && EXTENSION_FIELDS.iter().any(|f| reply.body.contains(f))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let started = Instant::now();
        // the gateway enforces the overall deadline; this only bounds the socket
        let timeout = Duration::from_secs(600);
        let mut extensions = self.extensions.load(Ordering::Relaxed);
        let mut reply = self.post(req, extensions, timeout).await?;
        if extensions && Self::rejects_extensions(&reply) {
            log::warn!(
                "{}: endpoint rejected extension sampling fields; dropping top_k/typical_p/repetition_penalty and friends",
                self.id
            );
            self.extensions.store(false, Ordering::Relaxed);
            extensions = false;
            reply = self.post(req, extensions, timeout).await?;
        }
        if !(200..300).contains(&reply.status) {
            let mut message = reply.body;
            message.truncate(2_000);
            return Err(GatewayError::Backend {
                status: reply.status,
                message,
                retry_after_ms: reply.retry_after_ms,
            });
        }
        let (content, usage) = parse_response_body(&reply.body)?;
        let usage = usage.unwrap_or_else(|| {
            let prompt_text = match &req.system_instruction {
                Some(s) => format!("{s} {}", req.user_content),
                None => req.user_content.clone(),
            };
            TokenUsage {
                prompt_tokens: count_tokens_fallback(&prompt_text),
                completion_tokens: count_tokens_fallback(&content),
                approximate: true,
            }
        });
        Ok(CompletionResponse {
            content,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GenerationParams;
    use std::sync::Mutex;

    struct Canned {
        replies: Mutex<Vec<HttpReply>>,
        bodies: Mutex<Vec<Value>>,
    }

    #[async_trait]
    impl Transport for Canned {
        async fn post_json(&self, _url: &str, _bearer: Option<&str>, body: &Value, _t: Duration) -> Result<HttpReply, GatewayError> {
            self.bodies.lock().unwrap().push(body.clone());
            Ok(self.replies.lock().unwrap().remove(0))
        }
    }

    fn reply(status: u16, body: &str) -> HttpReply {
        HttpReply {
            status,
            body: body.into(),
            retry_after_ms: None,
        }
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            model: "vicuna-7b".into(),
            system_instruction: Some("sys".into()),
            user_content: "Question: why?".into(),
            params: GenerationParams::default(),
        }
    }

    #[test]
    fn body_shape() {
        let b = build_request_body(&request(), "remote", true);
        assert_eq!(b["model"], "remote");
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"], "Question: why?");
        assert_eq!(b["temperature"], 0.7);
        assert_eq!(b["top_p"], 0.1);
        assert_eq!(b["max_tokens"], 1024);
        assert_eq!(b["top_k"], 40);
        assert_eq!(b["repetition_penalty"], 1.18);
        assert!(b.get("seed").is_none());
        let mut r = request();
        r.params.seed = 7;
        let b = build_request_body(&r, "remote", false);
        assert_eq!(b["seed"], 7);
        assert!(b.get("top_k").is_none());
    }

    #[test]
    fn parse_with_and_without_usage() {
        let (c, u) = parse_response_body(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":5,"completion_tokens":1}}"#,
        )
        .unwrap();
        assert_eq!(c, "hi");
        assert_eq!(u.unwrap().prompt_tokens, 5);
        let (_, u) = parse_response_body(r#"{"choices":[{"message":{"content":"hi"}}]}"#).unwrap();
        assert!(u.is_none());
        assert!(matches!(parse_response_body("{}"), Err(GatewayError::Decode(_))));
        assert!(matches!(parse_response_body("<html>"), Err(GatewayError::Decode(_))));
    }

    #[tokio::test]
    async fn missing_usage_falls_back_to_word_counts() {
        let t = Arc::new(Canned {
            replies: Mutex::new(vec![reply(200, r#"{"choices":[{"message":{"content":"one two three"}}]}"#)]),
            bodies: Mutex::new(vec![]),
        });
        let b = HttpBackend::new("h", "http://x/v1/chat/completions", "m", None, true, t);
        let resp = b.complete(&request()).await.unwrap();
        assert!(resp.usage.approximate);
        assert_eq!(resp.usage.completion_tokens, 3);
        assert_eq!(resp.usage.prompt_tokens, 3);
    }

    #[tokio::test]
    async fn extension_rejection_resends_without_them() {
        let t = Arc::new(Canned {
            replies: Mutex::new(vec![
                reply(400, r#"{"error":"unrecognized field top_k"}"#),
                reply(200, r#"{"choices":[{"message":{"content":"ok"}}],"usage":{"prompt_tokens":1,"completion_tokens":1}}"#),
                reply(200, r#"{"choices":[{"message":{"content":"ok"}}],"usage":{"prompt_tokens":1,"completion_tokens":1}}"#),
            ]),
            bodies: Mutex::new(vec![]),
        });
        let b = HttpBackend::new("h", "http://x", "m", None, true, t.clone());
        assert_eq!(b.complete(&request()).await.unwrap().content, "ok");
        b.complete(&request()).await.unwrap();
        let bodies = t.bodies.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        assert!(bodies[0].get("top_k").is_some());
        assert!(bodies[1].get("top_k").is_none());
        assert!(bodies[2].get("top_k").is_none());
    }

    #[tokio::test]
    async fn error_status_carries_message() {
        let t = Arc::new(Canned {
            replies: Mutex::new(vec![HttpReply {
                status: 429,
                body: "slow down".into(),
                retry_after_ms: Some(1500),
            }]),
            bodies: Mutex::new(vec![]),
        });
        let b = HttpBackend::new("h", "http://x", "m", None, false, t);
        assert_eq!(
            b.complete(&request()).await.unwrap_err(),
            GatewayError::Backend {
                status: 429,
                message: "slow down".into(),
                retry_after_ms: Some(1500)
            }
        );
    }
}
