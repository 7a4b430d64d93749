//! System prompts and user-turn messages for the generator and evaluator.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::Direction;

const GENERATOR_SYSTEM: &str = include_str!("../data/prompts/generator.txt");
const EVALUATOR_SYSTEM: &str = include_str!("../data/prompts/evaluator.txt");

/// Version tag of the user-turn templates below.
pub const TEMPLATE_VERSION: &str = "v1";

pub const OUTPUT_FORMAT_PHRASE: &str = "Output Format (must be followed exactly)";
pub const PROBLEM_TAGS_PHRASE: &str = "wrapped in <problem></problem> tags";
pub const TERMINATE_WORD: &str = "Terminate";

const KNOWLEDGE_POINTS_PREFIX: &str = "Knowledge points: ";
const REVISION_PREFIX: &str = "Revision feedback:\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("revision feedback is empty")]
    EmptyFeedback,
    #[error("generator output to evaluate is empty")]
    EmptyInput,
    #[error("prompt bundle invalid: {0}")]
    InvalidBundle(String),
    #[error("failed to read prompt file {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub generator_system: String,
    pub evaluator_system: String,
    pub version: String,
}

impl PromptBundle {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !self.generator_system.contains(OUTPUT_FORMAT_PHRASE) {
            return Err(PromptError::InvalidBundle(format!(
                "generator prompt lacks {OUTPUT_FORMAT_PHRASE:?}"
            )));
        }
        for phrase in [PROBLEM_TAGS_PHRASE, TERMINATE_WORD] {
            if !self.evaluator_system.contains(phrase) {
                return Err(PromptError::InvalidBundle(format!(
                    "evaluator prompt lacks {phrase:?}"
                )));
            }
        }
        Ok(())
    }

    /// Loads `generator.txt` and `evaluator.txt` from `dir`. The version is
    /// derived from the file contents so a manifest records which text ran.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map(|s| strip_final_newline(&s).to_string())
                .map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
        };
        let generator_system = read("generator.txt")?;
        let evaluator_system = read("evaluator.txt")?;
        let mut bundle = Self {
            generator_system,
            evaluator_system,
            version: String::new(),
        };
        bundle.version = format!("custom-{}", &bundle.content_hash()[..12]);
        bundle.validate()?;
        Ok(bundle)
    }

    /// Hex SHA-256 over both prompts and the user-turn template version.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.generator_system.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.evaluator_system.as_bytes());
        hasher.update([0u8]);
        hasher.update(TEMPLATE_VERSION.as_bytes());
        hex::encode(hasher.finalize())
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n')
        .map(|s| s.strip_suffix('\r').unwrap_or(s))
        .unwrap_or(s)
}

pub fn default_prompt_bundle() -> PromptBundle {
    PromptBundle {
        generator_system: strip_final_newline(GENERATOR_SYSTEM).to_string(),
        evaluator_system: strip_final_newline(EVALUATOR_SYSTEM).to_string(),
        version: format!("default-{TEMPLATE_VERSION}"),
    }
}

/// First generator turn: the direction as knowledge points.
pub fn initial_user_message(direction: &Direction) -> Message {
    Message::user(format!(
        "{KNOWLEDGE_POINTS_PREFIX}{} — {}.",
        direction.category, direction.title
    ))
}

pub fn revision_user_message(feedback: &str) -> Result<Message, PromptError> {
    if feedback.trim().is_empty() {
        return Err(PromptError::EmptyFeedback);
    }
    Ok(Message::user(format!("{REVISION_PREFIX}{feedback}")))
}

/// Inverse of [`revision_user_message`].
pub fn feedback_from_revision_message(content: &str) -> Option<&str> {
    content.strip_prefix(REVISION_PREFIX)
}

/// The evaluator sees the generator's latest output verbatim, with no framing.
pub fn evaluator_user_message(generator_output_raw: &str) -> Result<Message, PromptError> {
    if generator_output_raw.trim().is_empty() {
        return Err(PromptError::EmptyInput);
    }
    Ok(Message::user(generator_output_raw))
}

/// Sent once per round when the generator's output cannot be parsed.
pub fn format_reminder_message() -> Message {
    Message::user(
        "Your previous response did not follow the required output format. \
         Output the complete problem again using exactly this format:\n\n\
         problem:\n\n(Problem content)\n\nWhy is it a \"good\" problem:\n\n(Explanation)",
    )
}

/// Revision feedback used when the evaluator signalled acceptance but broke
/// the acceptance protocol (missing tags, or echoed a different problem).
pub fn protocol_retry_feedback(reason: &str) -> String {
    format!(
        "The evaluation of your problem could not be completed ({reason}). \
         Output the complete problem and its explanation again, unchanged, \
         in exactly the required output format."
    )
}
