//! Replays responses recorded in session transcripts.
//!
//! Lookup is by request fingerprint, so concurrent sessions replay correctly
//! regardless of interleaving. Identical requests are served in recorded order.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use super::{request_fingerprint, Completion, LlmError, ModelConfig, Transport};
use crate::prompts::Message;
use crate::session::Exchange;

#[derive(Debug, Default)]
pub struct ReplayTransport {
    recorded: Mutex<HashMap<String, VecDeque<Result<Completion, String>>>>,
}

impl ReplayTransport {
    pub fn from_exchanges<'a>(exchanges: impl IntoIterator<Item = &'a Exchange>) -> Self {
        let mut recorded: HashMap<String, VecDeque<_>> = HashMap::new();
        for ex in exchanges {
            let item = match &ex.error {
                Some(err) => Err(err.clone()),
                None => Ok(Completion {
                    content: ex.response.clone(),
                    input_tokens: ex.input_tokens,
                    output_tokens: ex.output_tokens,
                    latency_ms: ex.latency_ms,
                }),
            };
            recorded
                .entry(ex.request_fingerprint.clone())
                .or_default()
                .push_back(item);
        }
        Self {
            recorded: Mutex::new(recorded),
        }
    }

    pub fn remaining(&self) -> usize {
        self.recorded.lock().unwrap().values().map(VecDeque::len).sum()
    }
}

impl Transport for ReplayTransport {
    fn send(&self, model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        let fingerprint = request_fingerprint(&model.model_id, messages);
        let mut recorded = self.recorded.lock().unwrap();
        match recorded.get_mut(&fingerprint).and_then(VecDeque::pop_front) {
            Some(Ok(completion)) => Ok(completion),
            Some(Err(err)) => Err(LlmError::Replayed(err)),
            None => Err(LlmError::ReplayMiss(fingerprint)),
        }
    }
}
