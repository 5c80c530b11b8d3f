use std::sync::atomic::{AtomicUsize, Ordering};

use super::{BackendReply, LlmBackend, LlmRequest, Slot, TokenUsage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MockReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl MockReply {
    pub fn new(text: impl Into<String>) -> Self {
        MockReply {
            text: text.into(),
            usage: None,
        }
    }

    pub fn with_usage(mut self, input: u64, output: u64) -> Self {
        self.usage = Some(TokenUsage { input, output });
        self
    }
}

impl From<&str> for MockReply {
    fn from(s: &str) -> Self {
        MockReply::new(s)
    }
}

impl From<String> for MockReply {
    fn from(s: String) -> Self {
        MockReply::new(s)
    }
}

type Responder = Box<dyn Fn(&LlmRequest) -> Result<MockReply> + Send + Sync>;

struct Rule {
    pattern: String,
    slot: Option<Slot>,
    respond: Responder,
}

/// Scripted backend: the first registered rule whose pattern is a substring
/// of the prompt (and whose slot matches, if given) answers the request.
#[derive(Default)]
pub struct MockBackend {
    rules: Vec<Rule>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on<F, R>(self, pattern: &str, f: F) -> Self
    where
        F: Fn(&LlmRequest) -> R + Send + Sync + 'static,
        R: Into<MockReply>,
    {
        self.on_result(pattern, move |r| Ok(f(r).into()))
    }

    pub fn on_slot<F, R>(mut self, slot: Slot, pattern: &str, f: F) -> Self
    where
        F: Fn(&LlmRequest) -> R + Send + Sync + 'static,
        R: Into<MockReply>,
    {
        self.rules.push(Rule {
            pattern: pattern.to_string(),
            slot: Some(slot),
            respond: Box::new(move |r| Ok(f(r).into())),
        });
        self
    }

    pub fn on_result<F>(mut self, pattern: &str, f: F) -> Self
    where
        F: Fn(&LlmRequest) -> Result<MockReply> + Send + Sync + 'static,
    {
        self.rules.push(Rule {
            pattern: pattern.to_string(),
            slot: None,
            respond: Box::new(f),
        });
        self
    }

    /// Answers successive matching requests with `replies` in turn, repeating
    /// the last one once the list is exhausted.
    pub fn on_sequence(self, pattern: &str, replies: Vec<&str>) -> Self {
        assert!(!replies.is_empty(), "sequence needs at least one reply");
        let replies: Vec<String> = replies.into_iter().map(String::from).collect();
        let next = AtomicUsize::new(0);
        self.on(pattern, move |_| {
            let i = next.fetch_add(1, Ordering::SeqCst).min(replies.len() - 1);
            replies[i].clone()
        })
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, request: &LlmRequest) -> Result<BackendReply> {
        let rule = self
            .rules
            .iter()
            .find(|r| {
                r.slot.is_none_or(|s| s == request.slot) && request.prompt.contains(&r.pattern)
            })
            .ok_or_else(|| {
                let head: String = request.prompt.chars().take(80).collect();
                Error::Backend(format!("mock has no rule for prompt starting {head:?}"))
            })?;
        let reply = (rule.respond)(request)?;
        let usage = reply
            .usage
            .unwrap_or_else(|| TokenUsage::estimate(&request.prompt, &reply.text));
        Ok(BackendReply {
            text: reply.text,
            usage,
        })
    }
}
