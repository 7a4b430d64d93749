//! Scripted test double.
//!
//! Entries are consumed in order, one per call. Each entry may carry a
//! matcher that must accept the request before its response is returned.
//! Reply text supports two placeholders:
//!
//! - `{{last_user}}`: content of the latest user message
//! - `{{call}}`: 1-based index of this call on the transport
//!
//! A [`MockScript`] file (JSON) holds one script per role for `--mock` runs:
//!
//! ```json
//! {
//!   "generator": { "cycle": true, "entries": [ { "reply": "problem: ..." } ] },
//!   "evaluator": { "cycle": true, "entries": [ { "reply": "<problem>{{last_user}}</problem>\nTerminate" } ] }
//! }
//! ```

use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Completion, ErrorClass, LlmError, ModelConfig, Transport};
use crate::prompts::{Message, Role};

pub type MatchFn = dyn Fn(&[Message]) -> bool + Send + Sync;

/// Which requests a scripted entry will answer.
#[derive(Clone)]
pub enum Matcher {
    Any,
    /// Latest user message contains the substring.
    LastUserContains(String),
    /// System prompt contains the substring.
    SystemContains(String),
    Custom(Arc<MatchFn>),
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Any => write!(f, "Any"),
            Matcher::LastUserContains(s) => write!(f, "LastUserContains({s:?})"),
            Matcher::SystemContains(s) => write!(f, "SystemContains({s:?})"),
            Matcher::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

fn last_user(messages: &[Message]) -> Option<&str> {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
}

impl Matcher {
    pub fn matches(&self, messages: &[Message]) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::LastUserContains(s) => last_user(messages).is_some_and(|c| c.contains(s.as_str())),
            Matcher::SystemContains(s) => messages
                .first()
                .is_some_and(|m| m.role == Role::System && m.content.contains(s.as_str())),
            Matcher::Custom(f) => f(messages),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedResponse {
    Reply {
        content: String,
        input_tokens: u64,
        output_tokens: u64,
    },
    Error(LlmError),
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: ScriptedResponse,
}

impl ScriptEntry {
    pub fn response(response: ScriptedResponse) -> Self {
        Self {
            matcher: Matcher::Any,
            response,
        }
    }

    pub fn reply(content: impl Into<String>) -> Self {
        Self::reply_with_usage(content, 0, 0)
    }

    pub fn reply_with_usage(content: impl Into<String>, input_tokens: u64, output_tokens: u64) -> Self {
        Self::response(ScriptedResponse::Reply {
            content: content.into(),
            input_tokens,
            output_tokens,
        })
    }

    pub fn error(class: ErrorClass) -> Self {
        Self::response(ScriptedResponse::Error(error_for_class(class)))
    }

    pub fn matching(mut self, matcher: Matcher) -> Self {
        self.matcher = matcher;
        self
    }
}

fn error_for_class(class: ErrorClass) -> LlmError {
    match class {
        ErrorClass::RateLimited => LlmError::RateLimited("scripted 429".into()),
        ErrorClass::Server => LlmError::Server {
            status: 500,
            body: "scripted".into(),
        },
        ErrorClass::Timeout => LlmError::Timeout("scripted".into()),
        ErrorClass::Network => LlmError::Network("scripted".into()),
    }
}

/// Deterministic transport that replays a fixed script.
#[derive(Debug)]
pub struct ScriptedTransport {
    entries: Vec<ScriptEntry>,
    cycle: bool,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    next: usize,
    calls: Vec<Vec<Message>>,
}

impl ScriptedTransport {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cycle: false,
            state: Mutex::new(ScriptState::default()),
        }
    }

    /// Restart from the first entry once the script runs out.
    pub fn cycling(entries: Vec<ScriptEntry>) -> Self {
        Self {
            cycle: true,
            ..Self::new(entries)
        }
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().calls.len()
    }

    /// Every request received, in order.
    pub fn calls(&self) -> Vec<Vec<Message>> {
        self.state.lock().unwrap().calls.clone()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        let mut state = self.state.lock().unwrap();
        state.calls.push(messages.to_vec());
        let call = state.calls.len();
        if self.entries.is_empty() || (!self.cycle && state.next >= self.entries.len()) {
            return Err(LlmError::ScriptExhausted { calls: call - 1 });
        }
        let index = state.next % self.entries.len();
        state.next += 1;
        let entry = &self.entries[index];
        if !entry.matcher.matches(messages) {
            return Err(LlmError::MatchFailure {
                index,
                expected: format!("{:?}", entry.matcher),
            });
        }
        match &entry.response {
            ScriptedResponse::Reply {
                content,
                input_tokens,
                output_tokens,
            } => {
                let content = content
                    .replace("{{last_user}}", last_user(messages).unwrap_or_default())
                    .replace("{{call}}", &call.to_string());
                Ok(Completion {
                    content,
                    input_tokens: *input_tokens,
                    output_tokens: *output_tokens,
                    latency_ms: 0,
                })
            }
            ScriptedResponse::Error(e) => Err(e.clone()),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("failed to read mock script {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid mock script: {0}")]
    Invalid(String),
}

/// Serialized form of one entry in a mock script file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntrySpec {
    /// Substring the latest user message must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_user_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    /// One of `rate_limited`, `server`, `timeout`, `network`, `auth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
}

impl ScriptEntrySpec {
    fn to_entry(&self) -> Result<ScriptEntry, ScriptError> {
        let response = match (&self.reply, &self.error) {
            (Some(reply), None) => ScriptedResponse::Reply {
                content: reply.clone(),
                input_tokens: self.input_tokens,
                output_tokens: self.output_tokens,
            },
            (None, Some(err)) => ScriptedResponse::Error(match err.as_str() {
                "rate_limited" => error_for_class(ErrorClass::RateLimited),
                "server" => error_for_class(ErrorClass::Server),
                "timeout" => error_for_class(ErrorClass::Timeout),
                "network" => error_for_class(ErrorClass::Network),
                "auth" => LlmError::Auth("scripted".into()),
                other => return Err(ScriptError::Invalid(format!("unknown error kind {other:?}"))),
            }),
            _ => {
                return Err(ScriptError::Invalid(
                    "each entry needs exactly one of `reply` or `error`".into(),
                ))
            }
        };
        let matcher = match &self.expect_user_contains {
            Some(s) => Matcher::LastUserContains(s.clone()),
            None => Matcher::Any,
        };
        Ok(ScriptEntry { matcher, response })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleScript {
    #[serde(default)]
    pub cycle: bool,
    pub entries: Vec<ScriptEntrySpec>,
}

impl RoleScript {
    pub fn build(&self) -> Result<ScriptedTransport, ScriptError> {
        if self.entries.is_empty() {
            return Err(ScriptError::Invalid("script has no entries".into()));
        }
        let entries = self
            .entries
            .iter()
            .map(ScriptEntrySpec::to_entry)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(if self.cycle {
            ScriptedTransport::cycling(entries)
        } else {
            ScriptedTransport::new(entries)
        })
    }
}

/// Mock script file: one script for each role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub generator: RoleScript,
    pub evaluator: RoleScript,
}

impl MockScript {
    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| ScriptError::Invalid(e.to_string()))
    }

    pub fn build(&self) -> Result<(ScriptedTransport, ScriptedTransport), ScriptError> {
        Ok((self.generator.build()?, self.evaluator.build()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::prompts::initial_user_message;

    fn model() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn first_call_returns_first_entry() {
        let text = "problem:\nP\nWhy is it a \"good\" problem:\nJ";
        let t = ScriptedTransport::new(vec![ScriptEntry::reply(text)]);
        let out = t.send(&model(), &[Message::system("s"), Message::user("u")]).unwrap();
        assert_eq!(out.content, text);
    }

    #[test]
    fn exhaustion() {
        let t = ScriptedTransport::new(vec![ScriptEntry::reply("x")]);
        let msgs = [Message::system("s"), Message::user("u")];
        t.send(&model(), &msgs).unwrap();
        assert_eq!(t.send(&model(), &msgs), Err(LlmError::ScriptExhausted { calls: 1 }));
    }

    #[test]
    fn matcher_against_initial_message() {
        let direction = Catalog::shipped().get(1).unwrap().clone();
        let t = ScriptedTransport::new(vec![
            ScriptEntry::reply("ok").matching(Matcher::LastUserContains("Knowledge points".into())),
            ScriptEntry::reply("no").matching(Matcher::LastUserContains("Revision feedback".into())),
        ]);
        let msgs = [Message::system("s"), initial_user_message(&direction)];
        assert_eq!(t.send(&model(), &msgs).unwrap().content, "ok");
        assert!(matches!(t.send(&model(), &msgs), Err(LlmError::MatchFailure { index: 1, .. })));
    }

    #[test]
    fn placeholders_and_cycling() {
        let t = ScriptedTransport::cycling(vec![ScriptEntry::reply("#{{call}}: {{last_user}}")]);
        let msgs = [Message::system("s"), Message::user("echo me")];
        assert_eq!(t.send(&model(), &msgs).unwrap().content, "#1: echo me");
        assert_eq!(t.send(&model(), &msgs).unwrap().content, "#2: echo me");
    }

    #[test]
    fn deterministic_for_same_calls() {
        let run = || {
            let t = ScriptedTransport::new(vec![
                ScriptEntry::reply("a{{call}}"),
                ScriptEntry::error(ErrorClass::Timeout),
                ScriptEntry::reply("{{last_user}}"),
            ]);
            let msgs = [Message::system("s"), Message::user("u")];
            (0..4).map(|_| t.send(&model(), &msgs)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn script_file_parsing() {
        let json = r#"{
            "generator": {"entries": [{"reply": "g", "input_tokens": 3}, {"error": "rate_limited"}]},
            "evaluator": {"cycle": true, "entries": [{"reply": "e", "expect_user_contains": "g"}]}
        }"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        let (g, e) = script.build().unwrap();
        let msgs = [Message::system("s"), Message::user("g")];
        assert_eq!(g.send(&model(), &msgs).unwrap().input_tokens, 3);
        assert!(matches!(g.send(&model(), &msgs), Err(LlmError::RateLimited(_))));
        assert_eq!(e.send(&model(), &msgs).unwrap().content, "e");

        let bad: MockScript =
            serde_json::from_str(r#"{"generator":{"entries":[{"reply":"x","error":"auth"}]},"evaluator":{"entries":[]}}"#)
                .unwrap();
        assert!(bad.build().is_err());
    }
}
