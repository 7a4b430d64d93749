//! Generator/evaluator agent for drafting research-level math problems.
//!
//! A generator model drafts a problem for a catalog direction, an evaluator
//! model critiques it, and the loop runs until the evaluator accepts or a
//! round budget runs out. Accepted problems land in an append-only corpus.

pub mod batch;
pub mod catalog;
pub mod client;
pub mod clock;
pub mod parser;
pub mod prompts;
pub mod session;
pub mod store;

pub use batch::{BatchConfig, BatchError, BatchRunner, RunDir, RunManifest, SlotStatus};
pub use catalog::{Catalog, CatalogError, Direction};
pub use client::{LlmClient, LlmError, ModelConfig, RetryPolicy, Transport};
pub use clock::{Clock, FakeClock, SystemClock};
pub use parser::{EvaluatorVerdict, ParseError, ProblemDraft, VerdictKind};
pub use prompts::{Message, PromptBundle, Role};
pub use session::{run_session, Session, SessionClients, SessionConfig, SessionKey, SessionStatus};
pub use store::{AcceptedProblem, ReviewLabel, ReviewVerdict, Store, StoreError};
