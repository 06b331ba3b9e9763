//! LLM provider contract.
//!
//! Every LLM touchpoint (segmentation, extraction, dedup resolution, merge,
//! compression) goes through [`LlmProvider`]. Token usage is reported on
//! every call so extraction cost can be accounted for.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f32,
    pub max_tokens: u32,
    /// Free-form label recorded with the call (e.g. "segmentation").
    pub purpose: String,
}

impl CompletionParams {
    pub fn for_purpose(purpose: &str) -> Self {
        CompletionParams {
            temperature: 0.0,
            max_tokens: 2048,
            purpose: purpose.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("no scripted reply matches prompt (purpose {purpose})")]
    NoScriptMatch { purpose: String },
    #[error("provider timed out")]
    Timeout,
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("provider returned malformed response: {0}")]
    BadResponse(String),
    #[error("provider failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: Box<ProviderError> },
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Completion, ProviderError>;
}

/// Whitespace token count; the accounting unit of the mock provider.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub purpose: String,
    pub usage: TokenUsage,
    pub matched: Option<usize>,
}

/// Deterministic provider that replays scripted replies.
///
/// The first entry whose `match` substring occurs in the prompt wins.
#[derive(Debug, Default)]
pub struct MockProvider {
    script: Vec<ScriptEntry>,
    calls: Mutex<Vec<CallRecord>>,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl MockProvider {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        MockProvider {
            script,
            ..Default::default()
        }
    }

    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self::new(
            pairs
                .into_iter()
                .map(|(m, r)| ScriptEntry {
                    pattern: m.into(),
                    reply: r.into(),
                })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().clone()
    }

    pub fn calls_for(&self, purpose: &str) -> Vec<CallRecord> {
        self.calls
            .lock()
            .iter()
            .filter(|c| c.purpose == purpose)
            .cloned()
            .collect()
    }

    pub fn total_usage(&self) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
        }
    }
}

impl LlmProvider for MockProvider {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Completion, ProviderError> {
        let matched = self
            .script
            .iter()
            .position(|e| prompt.contains(&e.pattern));
        let prompt_tokens = count_tokens(prompt);
        let (reply, completion_tokens) = match matched {
            Some(i) => {
                let r = self.script[i].reply.clone();
                let n = count_tokens(&r);
                (Some(r), n)
            }
            None => (None, 0),
        };
        let usage = TokenUsage {
            prompt_tokens,
            completion_tokens,
        };
        self.prompt_tokens.fetch_add(prompt_tokens, Ordering::SeqCst);
        self.completion_tokens
            .fetch_add(completion_tokens, Ordering::SeqCst);
        self.calls.lock().push(CallRecord {
            purpose: params.purpose.clone(),
            usage,
            matched,
        });
        match reply {
            Some(text) => Ok(Completion { text, usage }),
            None => Err(ProviderError::NoScriptMatch {
                purpose: params.purpose.clone(),
            }),
        }
    }
}

/// Provider speaking the common chat-completions HTTP protocol.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    max_retries: u32,
}

impl HttpProvider {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        HttpProvider {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            max_retries: 2,
        }
    }

    fn call_once(&self, prompt: &str, params: &CompletionParams) -> Result<Completion, ProviderError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self
            .agent
            .post(&format!("{}/chat/completions", self.endpoint));
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Transport(t) if t.kind() == ureq::ErrorKind::Io => ProviderError::Timeout,
            other => ProviderError::Transport(other.to_string()),
        })?;
        let v: serde_json::Value = resp
            .into_json()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))?
            .to_string();
        let usage = TokenUsage {
            prompt_tokens: v["usage"]["prompt_tokens"]
                .as_u64()
                .unwrap_or_else(|| count_tokens(prompt)),
            completion_tokens: v["usage"]["completion_tokens"]
                .as_u64()
                .unwrap_or_else(|| count_tokens(&text)),
        };
        Ok(Completion { text, usage })
    }
}

impl LlmProvider for HttpProvider {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Completion, ProviderError> {
        let mut last = None;
        for attempt in 0..=self.max_retries {
            match self.call_once(prompt, params) {
                Ok(c) => return Ok(c),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "provider call failed");
                    last = Some(e);
                }
            }
        }
        Err(ProviderError::Exhausted {
            attempts: self.max_retries + 1,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_wins_and_tokens_counted() {
        let p = MockProvider::from_pairs([("alpha", "one two"), ("a", "three")]);
        let c = p
            .complete("say alpha now", &CompletionParams::for_purpose("t"))
            .unwrap();
        assert_eq!(c.text, "one two");
        assert_eq!(c.usage, TokenUsage { prompt_tokens: 3, completion_tokens: 2 });
        let c = p.complete("a b", &CompletionParams::for_purpose("t")).unwrap();
        assert_eq!(c.text, "three");
        assert_eq!(p.total_usage().prompt_tokens, 5);
        assert_eq!(p.calls().len(), 2);
    }

    #[test]
    fn unmatched_prompt_is_an_error_but_still_counted() {
        let p = MockProvider::from_pairs([("zzz", "x")]);
        let err = p.complete("hello world", &CompletionParams::for_purpose("merge"));
        assert!(matches!(err, Err(ProviderError::NoScriptMatch { .. })));
        assert_eq!(p.total_usage().prompt_tokens, 2);
    }

    #[test]
    fn script_file_format() {
        let p = MockProvider::from_json(r#"[{"match": "hi", "reply": "there"}]"#).unwrap();
        assert_eq!(
            p.complete("hi", &CompletionParams::for_purpose("t")).unwrap().text,
            "there"
        );
    }
}
