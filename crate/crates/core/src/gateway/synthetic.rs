//! Deterministic offline backend for dry runs and fixture generation.

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use super::{count_tokens_fallback, Backend, CompletionRequest, CompletionResponse, GatewayError, TokenUsage};

const WORDS: [&str; 16] = [
    "the", "answer", "depends", "on", "context", "and", "careful", "reasoning", "about", "each", "detail", "shows",
    "that", "a", "clear", "result",
];

/// Produces text (or, in judge mode, a two-score verdict) from a hash of the
/// request, so identical requests always get identical responses.
pub struct SyntheticBackend {
    id: String,
    judge: bool,
}

impl SyntheticBackend {
    pub fn generator(id: impl Into<String>) -> Self {
        SyntheticBackend {
            id: id.into(),
            judge: false,
        }
    }

    pub fn judge(id: impl Into<String>) -> Self {
        SyntheticBackend {
            id: id.into(),
            judge: true,
        }
    }

    fn digest(req: &CompletionRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(req.model.as_bytes());
        h.update([0]);
        h.update(req.user_content.as_bytes());
        h.finalize().into()
    }
}

#[async_trait]
impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let d = Self::digest(req);
        let tag = hex::encode(&d[..4]);
        let content = if self.judge {
            let a = 1 + d[0] % 10;
            let b = 1 + d[1] % 10;
            format!("{a} {b}\nSynthetic assessment {tag}.")
        } else {
            let n = 12 + (d[2] as usize % 24);
            let body: Vec<&str> = (0..n).map(|i| WORDS[d[(3 + i) % 32] as usize % WORDS.len()]).collect();
            format!("[{}:{tag}] {}.", req.model, body.join(" "))
        };
        let prompt_text = match &req.system_instruction {
            Some(s) => format!("{s} {}", req.user_content),
            None => req.user_content.clone(),
        };
        Ok(CompletionResponse {
            usage: TokenUsage {
                prompt_tokens: count_tokens_fallback(&prompt_text),
                completion_tokens: count_tokens_fallback(&content),
                approximate: false,
            },
            content,
            latency_ms: 1,
            backend_id: self.id.clone(),
            attempts: 1,
        })
    }
}
