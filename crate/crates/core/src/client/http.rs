//! OpenAI-compatible chat completions over HTTP(S) with bearer auth.

use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use super::{Completion, LlmError, ModelConfig, Transport};
use crate::prompts::Message;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_completion_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

pub struct HttpTransport {
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    extra_headers: Vec<(String, String)>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("extra_headers", &self.extra_headers)
            .finish()
    }
}

impl HttpTransport {
    pub fn new(api_key: Option<String>) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Network(e.to_string()))?;
        Ok(Self {
            http,
            api_key,
            extra_headers: Vec::new(),
        })
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.extra_headers.push((name.into(), value.into()));
        self
    }
}

/// `endpoint` may be a base URL (`https://host/v1`) or the full
/// `/chat/completions` URL.
pub fn completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

pub(crate) fn classify_status(status: u16, body: String) -> LlmError {
    match status {
        401 | 403 => LlmError::Auth(body),
        408 => LlmError::Timeout(body),
        429 => LlmError::RateLimited(body),
        500..=599 => LlmError::Server { status, body },
        _ => LlmError::Http { status, body },
    }
}

/// Extracts the assistant turn and token usage from a response body.
pub(crate) fn parse_response(body: &str) -> Result<(String, u64, u64), LlmError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(format!("not JSON: {e}")))?;
    let message = value
        .pointer("/choices/0/message")
        .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message".into()))?;
    if message.get("role").and_then(Value::as_str).is_some_and(|r| r != "assistant") {
        return Err(LlmError::MalformedResponse("choice is not an assistant turn".into()));
    }
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| LlmError::MalformedResponse("assistant turn has no content".into()))?;

    let usage = value.get("usage");
    let tokens = |key: &str| usage.and_then(|u| u.get(key)).and_then(Value::as_u64);
    let (input, output) = match (tokens("prompt_tokens"), tokens("completion_tokens")) {
        (Some(i), Some(o)) => (i, o),
        _ => {
            log::warn!("response carries no usage field; recording 0 tokens");
            (0, 0)
        }
    };
    Ok((content.to_string(), input, output))
}

impl Transport for HttpTransport {
    fn send(&self, model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        let request = ChatRequest {
            model: &model.model_id,
            messages: messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.as_str(),
                    content: &m.content,
                })
                .collect(),
            temperature: model.temperature,
            max_completion_tokens: model.max_output_tokens,
        };

        let mut builder = self
            .http
            .post(completions_url(&model.endpoint))
            .timeout(model.timeout())
            .json(&request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        for (name, value) in &self.extra_headers {
            builder = builder.header(name, value);
        }

        let started = Instant::now();
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout(e.to_string())
            } else {
                LlmError::Network(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout(e.to_string())
            } else {
                LlmError::Network(e.to_string())
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, body));
        }
        let (content, input_tokens, output_tokens) = parse_response(&body)?;
        Ok(Completion {
            content,
            input_tokens,
            output_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls() {
        assert_eq!(completions_url("https://x/v1/"), "https://x/v1/chat/completions");
        assert_eq!(
            completions_url("http://x/v1/chat/completions"),
            "http://x/v1/chat/completions"
        );
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(401, String::new()), LlmError::Auth(_)));
        assert!(matches!(classify_status(429, String::new()), LlmError::RateLimited(_)));
        assert!(matches!(classify_status(503, String::new()), LlmError::Server { status: 503, .. }));
        assert!(matches!(classify_status(400, String::new()), LlmError::Http { status: 400, .. }));
    }

    #[test]
    fn response_parsing() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":4}}"#;
        assert_eq!(parse_response(ok).unwrap(), ("hi".to_string(), 3, 4));
        let no_usage = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_response(no_usage).unwrap(), ("hi".to_string(), 0, 0));
        for bad in [
            "nope",
            r#"{"choices":[]}"#,
            r#"{"choices":[{"message":{"role":"assistant","content":null}}]}"#,
            r#"{"choices":[{"message":{"role":"user","content":"x"}}]}"#,
        ] {
            assert!(matches!(parse_response(bad), Err(LlmError::MalformedResponse(_))), "{bad}");
        }
    }
}
