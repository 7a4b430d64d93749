//! One generate → evaluate → revise loop for a single (direction, slot).
//!
//! The generator keeps a growing conversation: its system prompt, the
//! knowledge-points turn, then alternating assistant drafts and user
//! revision turns. The evaluator gets a fresh two-message context every
//! round: its system prompt and the generator's latest raw output.
//!
//! Failure bounds:
//! - a draft that fails to parse gets one format-reminder reprompt in that
//!   round; reprompts across the session are capped at
//!   `max_protocol_violations + 1`
//! - an acceptance that breaks the protocol (sentinel without tags, or an
//!   echo that is not the same problem) is turned into a revision round;
//!   more than `max_protocol_violations` of them fail the session
//! - `max_rounds` rounds without acceptance exhausts the session

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::Direction;
use crate::client::{request_fingerprint, LlmClient, LlmError, ModelConfig, UsageTotals};
use crate::parser::{
    self, parse_evaluator_output, parse_generator_output, EvaluatorVerdict, ParseError, ProblemDraft,
    DEFAULT_SAME_PROBLEM_THRESHOLD,
};
use crate::prompts::{self, Message, PromptBundle};
use crate::store::AcceptedProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub max_rounds: u32,
    pub same_problem_threshold: f64,
    pub max_protocol_violations: u32,
    pub generator_model: ModelConfig,
    pub evaluator_model: ModelConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 6,
            same_problem_threshold: DEFAULT_SAME_PROBLEM_THRESHOLD,
            max_protocol_violations: 2,
            generator_model: ModelConfig::default(),
            evaluator_model: ModelConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds == 0 {
            return Err("max_rounds must be >= 1".into());
        }
        if !(self.same_problem_threshold > 0.0 && self.same_problem_threshold <= 1.0) {
            return Err(format!(
                "same_problem_threshold {} must be in (0, 1]",
                self.same_problem_threshold
            ));
        }
        self.generator_model
            .validate()
            .map_err(|e| format!("generator model: {e}"))?;
        self.evaluator_model
            .validate()
            .map_err(|e| format!("evaluator model: {e}"))
    }

    /// Upper bound on LLM calls a single session can make.
    pub fn max_calls(&self) -> u32 {
        2 * self.max_rounds + self.max_protocol_violations + 1
    }
}

/// Identifies one session attempt inside a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub run_id: String,
    pub direction_id: u32,
    pub slot: u32,
    pub attempt: u32,
}

impl SessionKey {
    pub fn new(run_id: impl Into<String>, direction_id: u32, slot: u32, attempt: u32) -> Self {
        Self {
            run_id: run_id.into(),
            direction_id,
            slot,
            attempt,
        }
    }

    pub fn label(&self) -> String {
        format!("d{:03}-s{}-a{}", self.direction_id, self.slot, self.attempt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    InProgress,
    Accepted,
    Exhausted,
    ProtocolFailed,
    TransportFailed,
}

/// Why a round that looked like an acceptance was downgraded to a revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolViolation {
    TerminateWithoutProblemTags,
    EmptyEvaluation,
    EchoMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: u32,
    pub draft: ProblemDraft,
    pub verdict: EvaluatorVerdict,
    /// Set when the draft needed a format reminder before it parsed.
    pub format_reprompted: bool,
    pub violation: Option<ProtocolViolation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExchangeRole {
    Generator,
    Evaluator,
}

/// One request/response pair, as written to the transcript log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub session_key: String,
    pub round: u32,
    pub role: ExchangeRole,
    pub model_id: String,
    pub request_fingerprint: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_ms: u64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub key: SessionKey,
    pub generator_history: Vec<Message>,
    pub rounds: Vec<Round>,
    pub status: SessionStatus,
    pub accepted: Option<AcceptedProblem>,
    pub exchanges: Vec<Exchange>,
    pub failure: Option<String>,
    pub usage: UsageTotals,
    pub format_reprompts: u32,
    pub protocol_violations: u32,
}

impl Session {
    pub fn calls(&self) -> usize {
        self.exchanges.len()
    }

    pub fn user_turns(&self) -> usize {
        self.generator_history
            .iter()
            .filter(|m| m.role == prompts::Role::User)
            .count()
    }
}

pub struct SessionClients<'a> {
    pub generator: &'a LlmClient,
    pub evaluator: &'a LlmClient,
}

/// Ordered record of every exchange in a finished session.
pub fn session_transcript(session: &Session) -> &[Exchange] {
    &session.exchanges
}

struct Runner<'a> {
    clients: &'a SessionClients<'a>,
    config: &'a SessionConfig,
    session: Session,
}

enum Stop {
    Transport(LlmError),
    Protocol(String),
}

impl Runner<'_> {
    fn call(
        &mut self,
        role: ExchangeRole,
        round: u32,
        messages: &[Message],
    ) -> Result<String, Stop> {
        let (client, model) = match role {
            ExchangeRole::Generator => (self.clients.generator, &self.config.generator_model),
            ExchangeRole::Evaluator => (self.clients.evaluator, &self.config.evaluator_model),
        };
        let result = client.complete(model, messages);
        let mut exchange = Exchange {
            session_key: self.session.key.label(),
            round,
            role,
            model_id: model.model_id.clone(),
            request_fingerprint: request_fingerprint(&model.model_id, messages),
            response: String::new(),
            error: None,
            input_tokens: 0,
            output_tokens: 0,
            latency_ms: 0,
            timestamp: client.clock().now(),
        };
        match result {
            Ok(completion) => {
                self.session.usage.record(&completion);
                exchange.response = completion.content.clone();
                exchange.input_tokens = completion.input_tokens;
                exchange.output_tokens = completion.output_tokens;
                exchange.latency_ms = completion.latency_ms;
                self.session.exchanges.push(exchange);
                Ok(completion.content)
            }
            Err(err) => {
                exchange.error = Some(err.to_string());
                self.session.exchanges.push(exchange);
                Err(Stop::Transport(err))
            }
        }
    }

    fn generate(&mut self, round: u32) -> Result<(ProblemDraft, bool), Stop> {
        let history = self.session.generator_history.clone();
        let raw = self.call(ExchangeRole::Generator, round, &history)?;
        self.session.generator_history.push(Message::assistant(raw.clone()));
        let err = match parse_generator_output(&raw) {
            Ok(draft) => return Ok((draft, false)),
            Err(err) => err,
        };

        if self.session.format_reprompts > self.config.max_protocol_violations {
            return Err(Stop::Protocol(format!(
                "generator output unparseable ({err}); reprompt budget spent"
            )));
        }
        self.session.format_reprompts += 1;
        log::debug!("{}: round {round} draft unparseable ({err}); reprompting", self.session.key.label());
        self.session.generator_history.push(prompts::format_reminder_message());
        let history = self.session.generator_history.clone();
        let raw = self.call(ExchangeRole::Generator, round, &history)?;
        self.session.generator_history.push(Message::assistant(raw.clone()));
        parse_generator_output(&raw)
            .map(|draft| (draft, true))
            .map_err(|e| Stop::Protocol(format!("generator output unparseable after reminder ({e})")))
    }

    fn run(&mut self, prompts: &PromptBundle, direction: &Direction) -> Result<(), Stop> {
        let mut feedback: Option<String> = None;
        for index in 1..=self.config.max_rounds {
            if let Some(text) = feedback.take() {
                let msg = prompts::revision_user_message(&text)
                    .map_err(|e| Stop::Protocol(e.to_string()))?;
                self.session.generator_history.push(msg);
            }
            let (draft, format_reprompted) = self.generate(index)?;

            let eval_messages = [
                Message::system(prompts.evaluator_system.clone()),
                prompts::evaluator_user_message(&draft.raw).map_err(|e| Stop::Protocol(e.to_string()))?,
            ];
            let eval_raw = self.call(ExchangeRole::Evaluator, index, &eval_messages)?;

            let violation = match parse_evaluator_output(&eval_raw) {
                Ok(verdict) if verdict.is_accept() => {
                    let same = parser::verify_same_problem(
                        &draft,
                        &verdict,
                        self.config.same_problem_threshold,
                    )
                    .unwrap_or(false);
                    if same {
                        self.accept(direction, draft, verdict, format_reprompted, index);
                        return Ok(());
                    }
                    ProtocolViolation::EchoMismatch
                }
                Ok(verdict) => {
                    feedback = Some(verdict.feedback.clone());
                    self.session.rounds.push(Round {
                        index,
                        draft,
                        verdict,
                        format_reprompted,
                        violation: None,
                    });
                    continue;
                }
                Err(ParseError::TerminateWithoutProblemTags) => {
                    ProtocolViolation::TerminateWithoutProblemTags
                }
                Err(_) => ProtocolViolation::EmptyEvaluation,
            };

            self.session.protocol_violations += 1;
            let reason = match violation {
                ProtocolViolation::TerminateWithoutProblemTags => {
                    "the evaluator accepted without returning the problem in <problem></problem> tags"
                }
                ProtocolViolation::EmptyEvaluation => "the evaluator returned an empty response",
                ProtocolViolation::EchoMismatch => {
                    "the evaluator's accepted text did not match your problem"
                }
            };
            let synthesized = prompts::protocol_retry_feedback(reason);
            log::debug!("{}: round {index}: {reason}", self.session.key.label());
            self.session.rounds.push(Round {
                index,
                draft,
                verdict: EvaluatorVerdict::revise(synthesized.clone(), eval_raw),
                format_reprompted,
                violation: Some(violation),
            });
            if self.session.protocol_violations > self.config.max_protocol_violations {
                return Err(Stop::Protocol(format!(
                    "{} evaluator protocol violations (limit {})",
                    self.session.protocol_violations, self.config.max_protocol_violations
                )));
            }
            feedback = Some(synthesized);
        }
        self.session.status = SessionStatus::Exhausted;
        Ok(())
    }

    fn accept(
        &mut self,
        direction: &Direction,
        draft: ProblemDraft,
        verdict: EvaluatorVerdict,
        format_reprompted: bool,
        index: u32,
    ) {
        let key = &self.session.key;
        self.session.accepted = Some(AcceptedProblem::new(
            &key.run_id,
            direction.id,
            key.slot,
            &draft.statement,
            &draft.justification,
            index,
            &self.config.generator_model.model_id,
            &self.config.evaluator_model.model_id,
            self.session.usage,
            self.clients.generator.clock().now(),
        ));
        self.session.rounds.push(Round {
            index,
            draft,
            verdict,
            format_reprompted,
            violation: None,
        });
        self.session.status = SessionStatus::Accepted;
    }
}

/// Drives one session to a terminal status. Transport and protocol failures
/// are reported through [`Session::status`] and [`Session::failure`].
pub fn run_session(
    direction: &Direction,
    key: SessionKey,
    clients: &SessionClients<'_>,
    config: &SessionConfig,
    prompts: &PromptBundle,
) -> Session {
    let session = Session {
        key,
        generator_history: vec![
            Message::system(prompts.generator_system.clone()),
            prompts::initial_user_message(direction),
        ],
        rounds: Vec::new(),
        status: SessionStatus::InProgress,
        accepted: None,
        exchanges: Vec::new(),
        failure: None,
        usage: UsageTotals::default(),
        format_reprompts: 0,
        protocol_violations: 0,
    };
    let mut runner = Runner {
        clients,
        config,
        session,
    };
    match runner.run(prompts, direction) {
        Ok(()) => {}
        Err(Stop::Transport(err)) => {
            runner.session.status = SessionStatus::TransportFailed;
            runner.session.failure = Some(err.to_string());
        }
        Err(Stop::Protocol(reason)) => {
            runner.session.status = SessionStatus::ProtocolFailed;
            runner.session.failure = Some(reason);
        }
    }
    let session = runner.session;
    log::info!(
        "{}: {:?} after {} rounds, {} calls",
        session.key.label(),
        session.status,
        session.rounds.len(),
        session.calls()
    );
    session
}
