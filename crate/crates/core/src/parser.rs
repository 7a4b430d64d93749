//! Parsing of raw model text.
//!
//! Generator output has two headed sections:
//!
//! ```text
//! problem:
//! <statement>
//! Why is it a "good" problem:
//! <justification>
//! ```
//!
//! Header matching is case-insensitive and accepts numbered variants
//! (`Problem 2:`), curly or straight quotes, the `Why it is` word order, and
//! light markdown decoration (`**problem:**`, `## Problem 1:`).
//!
//! Evaluator output is an acceptance when its last non-empty line is exactly
//! `Terminate` and it carries a `<problem>...</problem>` span; anything else
//! is revision feedback.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAME_PROBLEM_THRESHOLD: f64 = 0.85;

const OPEN_TAG: &str = "<problem>";
const CLOSE_TAG: &str = "</problem>";
const SENTINEL: &str = "Terminate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Statement,
    Justification,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("model output is empty")]
    EmptyInput,
    #[error("missing \"problem:\" header")]
    MissingProblemHeader,
    #[error("missing \"Why is it a \\\"good\\\" problem:\" header")]
    MissingWhyHeader,
    #[error("empty {0:?} section")]
    EmptySection(Section),
    #[error("\"Terminate\" sentinel present without a well-formed <problem></problem> span")]
    TerminateWithoutProblemTags,
    #[error("verdict is not an acceptance")]
    NotAnAccept,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDraft {
    pub statement: String,
    pub justification: String,
    pub raw: String,
}

impl ProblemDraft {
    /// Renders the draft in the generator's output format.
    pub fn render(&self) -> String {
        render_generator_output(&self.statement, &self.justification)
    }
}

pub fn render_generator_output(statement: &str, justification: &str) -> String {
    format!("problem:\n\n{statement}\n\nWhy is it a \"good\" problem:\n\n{justification}\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    Accept,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorVerdict {
    pub kind: VerdictKind,
    /// Interior of the `<problem>` span; empty unless `kind == Accept`.
    pub final_problem: String,
    /// Feedback for the generator; empty unless `kind == Revise`.
    pub feedback: String,
    pub raw: String,
}

impl EvaluatorVerdict {
    pub fn revise(feedback: impl Into<String>, raw: impl Into<String>) -> Self {
        Self {
            kind: VerdictKind::Revise,
            final_problem: String::new(),
            feedback: feedback.into(),
            raw: raw.into(),
        }
    }

    pub fn is_accept(&self) -> bool {
        self.kind == VerdictKind::Accept
    }
}

fn problem_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^problem(?:\s+\d+)?\s*:").unwrap())
}

fn why_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)^why\s+(?:is\s+it|it\s+is)\s+a\s+["“”'‘’]?good["“”'‘’]?\s+problem\s*[:?]?"#,
        )
        .unwrap()
    })
}

/// A header found on some line: byte offset in `raw` where the section body
/// starts (just past the header text).
fn find_header(raw: &str, from: usize, re: &Regex) -> Option<(usize, usize)> {
    let mut offset = from;
    for line in raw[from..].split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let leading = line.len() - line.trim_start_matches(['#', '*', ' ', '\t']).len();
        let candidate = &line[leading..];
        if let Some(m) = re.find(candidate) {
            let mut end = line_start + leading + m.end();
            // closing markdown emphasis right after the colon, e.g. `**problem:**`
            end += raw[end..].len() - raw[end..].trim_start_matches('*').len();
            return Some((line_start, end));
        }
    }
    None
}

pub fn parse_generator_output(raw: &str) -> Result<ProblemDraft, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let (_, statement_start) =
        find_header(raw, 0, problem_header()).ok_or(ParseError::MissingProblemHeader)?;
    let (why_line, justification_start) =
        find_header(raw, statement_start, why_header()).ok_or(ParseError::MissingWhyHeader)?;

    let statement = trim_section(&raw[statement_start..why_line]);
    let justification = trim_section(&raw[justification_start..]);
    if statement.is_empty() {
        return Err(ParseError::EmptySection(Section::Statement));
    }
    if justification.is_empty() {
        return Err(ParseError::EmptySection(Section::Justification));
    }
    Ok(ProblemDraft {
        statement: statement.to_string(),
        justification: justification.to_string(),
        raw: raw.to_string(),
    })
}

fn trim_section(s: &str) -> &str {
    s.trim()
}

fn last_nonempty_line(raw: &str) -> Option<&str> {
    raw.lines().map(str::trim).rev().find(|l| !l.is_empty())
}

fn problem_span(raw: &str) -> Option<&str> {
    let open = raw.find(OPEN_TAG)?;
    let body_start = open + OPEN_TAG.len();
    let close = raw[body_start..].find(CLOSE_TAG)? + body_start;
    let interior = &raw[body_start..close];
    if interior.contains(OPEN_TAG) {
        return None;
    }
    let interior = interior.trim();
    (!interior.is_empty()).then_some(interior)
}

pub fn parse_evaluator_output(raw: &str) -> Result<EvaluatorVerdict, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyInput);
    }
    if last_nonempty_line(raw) != Some(SENTINEL) {
        return Ok(EvaluatorVerdict::revise(raw, raw));
    }
    let interior = problem_span(raw).ok_or(ParseError::TerminateWithoutProblemTags)?;
    Ok(EvaluatorVerdict {
        kind: VerdictKind::Accept,
        final_problem: interior.to_string(),
        feedback: String::new(),
        raw: raw.to_string(),
    })
}

/// Canonical token set used by [`similarity`].
///
/// Inline math (`$...$`, `$$...$$`, `\(...\)`, `\[...\]`) becomes one token
/// each, kept case-sensitive with inner whitespace collapsed. Remaining text is
/// lowercased and split on anything that is not alphanumeric.
pub fn canonical_tokens(text: &str) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    let mut plain = String::new();
    let mut rest = text;

    while !rest.is_empty() {
        match next_math_span(rest) {
            Some((start, end)) => {
                plain.push_str(&rest[..start]);
                plain.push(' ');
                let math = rest[start..end].split_whitespace().collect::<Vec<_>>().join(" ");
                tokens.insert(math);
                rest = &rest[end..];
            }
            None => {
                plain.push_str(rest);
                break;
            }
        }
    }

    for word in plain
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        tokens.insert(word.to_lowercase());
    }
    tokens
}

/// Byte range of the first complete math span in `text`.
fn next_math_span(text: &str) -> Option<(usize, usize)> {
    const DELIMS: [(&str, &str); 4] = [("$$", "$$"), ("\\[", "\\]"), ("\\(", "\\)"), ("$", "$")];
    let mut best: Option<(usize, usize)> = None;
    for (open, close) in DELIMS {
        let mut search = 0;
        while let Some(pos) = text[search..].find(open) {
            let start = search + pos;
            let body = start + open.len();
            match text[body..].find(close) {
                Some(rel) if rel > 0 => {
                    let end = body + rel + close.len();
                    if best.is_none_or(|(s, _)| start < s) {
                        best = Some((start, end));
                    }
                    break;
                }
                // Empty or unclosed here; an opener may still start one byte on.
                _ => search = start + 1,
            }
            if search >= text.len() {
                break;
            }
        }
    }
    best
}

/// Token-set Jaccard similarity of the canonical forms, in `[0, 1]`.
/// Two texts with no tokens are identical (1.0); one empty side gives 0.0.
pub fn similarity(a: &str, b: &str) -> f64 {
    jaccard(&canonical_tokens(a), &canonical_tokens(b))
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    intersection as f64 / union as f64
}

/// Whether an acceptance echoes the generator's draft closely enough.
pub fn verify_same_problem(
    draft: &ProblemDraft,
    verdict: &EvaluatorVerdict,
    threshold: f64,
) -> Result<bool, ParseError> {
    if !verdict.is_accept() {
        return Err(ParseError::NotAnAccept);
    }
    let draft_text = format!("{}\n{}", draft.statement, draft.justification);
    Ok(similarity(&draft_text, &verdict.final_problem) >= threshold)
}
