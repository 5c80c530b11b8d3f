use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendReply, LlmBackend, LlmRequest, Slot, TokenUsage};
use crate::error::{Error, Result};

/// A chat-completion endpoint (OpenAI-compatible request/response shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl Endpoint {
    /// Reads `FEATURIST_<SLOT>_URL`, `FEATURIST_<SLOT>_API_KEY` and
    /// `FEATURIST_<SLOT>_MODEL`.
    pub fn from_env(slot: Slot) -> Result<Self> {
        let prefix = format!("FEATURIST_{}", slot.as_str().to_ascii_uppercase());
        let url = std::env::var(format!("{prefix}_URL"))
            .map_err(|_| Error::Config(format!("{prefix}_URL is not set")))?;
        Ok(Endpoint {
            url,
            api_key: std::env::var(format!("{prefix}_API_KEY")).ok(),
            model: std::env::var(format!("{prefix}_MODEL")).unwrap_or_else(|_| "default".into()),
        })
    }
}

pub struct HttpBackend {
    agent: Endpoint,
    annotator: Endpoint,
    client: ureq::Agent,
}

impl HttpBackend {
    pub fn new(agent: Endpoint, annotator: Endpoint, timeout: Duration) -> Self {
        let client = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            annotator,
            client,
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        Ok(Self::new(
            Endpoint::from_env(Slot::Agent)?,
            Endpoint::from_env(Slot::Annotator)?,
            timeout,
        ))
    }

    fn endpoint(&self, slot: Slot) -> &Endpoint {
        match slot {
            Slot::Agent => &self.agent,
            Slot::Annotator => &self.annotator,
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply> {
        let ep = self.endpoint(request.slot);
        let body = json!({
            "model": ep.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": false,
        });
        let mut req = self.client.post(&ep.url).header("Content-Type", "application/json");
        if let Some(key) = &ep.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Backend(format!("{}: {e}", ep.url)))?;
        let status = resp.status();
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("{}: unreadable body ({status}): {e}", ep.url)))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("{}: HTTP {status}: {value}", ep.url)));
        }
        parse_chat_completion(&value)
    }
}

fn parse_chat_completion(value: &Value) -> Result<BackendReply> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Backend(format!("response lacks choices[0].message.content: {value}")))?
        .to_string();
    let usage = TokenUsage {
        input: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        output: value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(BackendReply { text, usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_openai_shape() {
        let v = json!({
            "choices": [{"message": {"role": "assistant", "content": "PROMPT"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 1}
        });
        let r = parse_chat_completion(&v).unwrap();
        assert_eq!(r.text, "PROMPT");
        assert_eq!(r.usage, TokenUsage { input: 12, output: 1 });
        assert!(parse_chat_completion(&json!({"error": "x"})).is_err());
    }
}
