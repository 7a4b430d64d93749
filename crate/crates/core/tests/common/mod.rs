#![allow(dead_code)]

pub mod oracle;

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};

use dmgen_core::batch::{BatchConfig, BatchRunner, FaultInjector, FaultKind, FaultPoint, RunDir};
use dmgen_core::catalog::Catalog;
use dmgen_core::client::{
    Completion, LlmClient, LlmError, ModelConfig, RetryPolicy, ScriptEntry, ScriptedTransport, Transport,
};
use dmgen_core::clock::FakeClock;
use dmgen_core::parser::render_generator_output;
use dmgen_core::prompts::{default_prompt_bundle, Message, PromptBundle};
use dmgen_core::session::{SessionClients, SessionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ECHO: &str = "<problem>{{last_user}}</problem>\nTerminate";
pub const CRITIQUE: &str = "The claim in the second sentence is a known corollary of the splitting theorem.\nReplace it with a question about the boundary case.";

/// Generator output whose words come from a large random vocabulary, so two
/// different seeds share almost no tokens.
pub fn problem_text(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = |n: usize| {
        (0..n)
            .map(|_| format!("w{}", rng.random_range(0..100_000u32)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let statement = format!("Let $M^{{{seed}}}$ be a closed manifold. Show that {}.", words(24));
    let justification = format!("It links {} to open questions.", words(12));
    render_generator_output(&statement, &justification)
}

pub fn session_config() -> SessionConfig {
    SessionConfig {
        generator_model: ModelConfig {
            model_id: "gen-model".into(),
            ..ModelConfig::default()
        },
        evaluator_model: ModelConfig {
            model_id: "eval-model".into(),
            ..ModelConfig::default()
        },
        ..SessionConfig::default()
    }
}

pub fn prompts() -> PromptBundle {
    default_prompt_bundle()
}

pub struct Harness {
    pub clock: Arc<FakeClock>,
    pub generator: LlmClient,
    pub evaluator: LlmClient,
}

impl Harness {
    pub fn new(generator: Arc<dyn Transport>, evaluator: Arc<dyn Transport>) -> Self {
        let clock = Arc::new(FakeClock::at_epoch());
        Self {
            generator: LlmClient::new(generator, RetryPolicy::default(), clock.clone()),
            evaluator: LlmClient::new(evaluator, RetryPolicy::default(), clock.clone()),
            clock,
        }
    }

    pub fn clients(&self) -> SessionClients<'_> {
        SessionClients {
            generator: &self.generator,
            evaluator: &self.evaluator,
        }
    }
}

pub fn replies(seeds: impl IntoIterator<Item = u64>) -> Vec<ScriptEntry> {
    seeds.into_iter().map(|s| ScriptEntry::reply(problem_text(s))).collect()
}

pub fn echo_evaluator() -> Arc<ScriptedTransport> {
    Arc::new(ScriptedTransport::cycling(vec![ScriptEntry::reply(ECHO)]))
}

pub fn batch_config(per_direction: u32, parallel: u32) -> BatchConfig {
    BatchConfig {
        problems_per_direction: per_direction,
        max_parallel_sessions: parallel,
        ..BatchConfig::default()
    }
}

pub struct FailAt {
    pub kind: FaultKind,
    pub sequence: u32,
}

impl FaultInjector for FailAt {
    fn should_fail(&self, point: &FaultPoint) -> bool {
        point.kind == self.kind && point.sequence == self.sequence
    }
}

pub fn runner<'a>(
    catalog: &'a Catalog,
    directions: &[u32],
    config: &'a BatchConfig,
    session: &'a SessionConfig,
    prompts: &'a PromptBundle,
    harness: &'a Harness,
    dir: &std::path::Path,
) -> BatchRunner<'a> {
    BatchRunner {
        catalog,
        directions: directions.to_vec(),
        config,
        session,
        prompts,
        clients: harness.clients(),
        run_dir: RunDir::new(dir),
        faults: None,
        on_event: None,
    }
}

fn hash_of(text: &str) -> u64 {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    h.finish()
}

/// Generator whose n-th reply for a direction depends only on the direction
/// and n, so outcomes do not depend on how workers interleave. Every 7th
/// reply has no headers and every 7th (offset 4) repeats an earlier draft.
#[derive(Default)]
pub struct DirectionalGenerator {
    counters: Mutex<HashMap<String, u64>>,
}

impl Transport for DirectionalGenerator {
    fn send(&self, _model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        let key = messages[1].content.clone();
        let n = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(key.clone()).or_default();
            *c += 1;
            *c - 1
        };
        let base = hash_of(&key) % 1_000_000 * 100;
        let content = match n % 7 {
            2 => "I think a good question would be about curvature.".to_string(),
            4 => problem_text(base + 1),
            _ => problem_text(base + n),
        };
        Ok(with_usage(messages, content))
    }
}

/// Critiques roughly a third of drafts, chosen by content hash; echoes the rest.
pub struct HashEvaluator;

impl Transport for HashEvaluator {
    fn send(&self, _model: &ModelConfig, messages: &[Message]) -> Result<Completion, LlmError> {
        let draft = &messages.last().unwrap().content;
        let content = if hash_of(draft).is_multiple_of(3) {
            CRITIQUE.to_string()
        } else {
            format!("<problem>{draft}</problem>\nTerminate")
        };
        Ok(with_usage(messages, content))
    }
}

fn with_usage(messages: &[Message], content: String) -> Completion {
    let input: usize = messages.iter().map(|m| m.content.len()).sum();
    Completion {
        input_tokens: input as u64 / 4,
        output_tokens: content.len() as u64 / 4,
        content,
        latency_ms: 0,
    }
}
