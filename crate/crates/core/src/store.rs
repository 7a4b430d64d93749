//! Append-only corpus of accepted problems plus the human review label log.
//!
//! Layout inside a run directory:
//!
//! ```text
//! corpus.jsonl   one AcceptedProblem per line
//! labels.jsonl   one ReviewLabel per line; later lines supersede earlier
//!                ones for the same (problem_id, reviewer)
//! ```
//!
//! Every append is a single `write_all` of one complete line followed by
//! `sync_data`. A trailing line without its newline is a torn write from a
//! crash; readers ignore it and the next writer truncates it away.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::UsageTotals;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0} already exists")]
    DuplicateRecord(String),
    #[error("unknown problem {0}")]
    UnknownProblem(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("corrupt {file} at line {line}: {reason}")]
    Corrupt {
        file: String,
        line: usize,
        reason: String,
    },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StoreUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedProblem {
    pub problem_id: String,
    pub run_id: String,
    pub direction_id: u32,
    pub slot: u32,
    pub statement: String,
    pub justification: String,
    pub rounds_used: u32,
    pub generator_model_id: String,
    pub evaluator_model_id: String,
    pub usage: UsageTotals,
    pub created: DateTime<Utc>,
}

/// Content hash of statement, direction and slot (first 128 bits, hex).
pub fn problem_id(statement: &str, direction_id: u32, slot: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(statement.as_bytes());
    hasher.update([0u8]);
    hasher.update(direction_id.to_string().as_bytes());
    hasher.update([0u8]);
    hasher.update(slot.to_string().as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

impl AcceptedProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run_id: &str,
        direction_id: u32,
        slot: u32,
        statement: &str,
        justification: &str,
        rounds_used: u32,
        generator_model_id: &str,
        evaluator_model_id: &str,
        usage: UsageTotals,
        created: DateTime<Utc>,
    ) -> Self {
        Self {
            problem_id: problem_id(statement, direction_id, slot),
            run_id: run_id.to_string(),
            direction_id,
            slot,
            statement: statement.to_string(),
            justification: justification.to_string(),
            rounds_used,
            generator_model_id: generator_model_id.to_string(),
            evaluator_model_id: evaluator_model_id.to_string(),
            usage,
            created,
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.statement.trim().is_empty() || self.justification.trim().is_empty() {
            return Err(StoreError::InvalidRecord(
                "statement and justification must be non-empty".into(),
            ));
        }
        let expected = problem_id(&self.statement, self.direction_id, self.slot);
        if self.problem_id != expected {
            return Err(StoreError::InvalidRecord(format!(
                "problem_id {} does not match content hash {expected}",
                self.problem_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewVerdict {
    UnknownToExperts,
    KnownOrOverlapsLiterature,
    IllPosed,
    TrivialOrRoutine,
}

impl ReviewVerdict {
    pub const ALL: [ReviewVerdict; 4] = [
        ReviewVerdict::UnknownToExperts,
        ReviewVerdict::KnownOrOverlapsLiterature,
        ReviewVerdict::IllPosed,
        ReviewVerdict::TrivialOrRoutine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReviewVerdict::UnknownToExperts => "unknown_to_experts",
            ReviewVerdict::KnownOrOverlapsLiterature => "known_or_overlaps_literature",
            ReviewVerdict::IllPosed => "ill_posed",
            ReviewVerdict::TrivialOrRoutine => "trivial_or_routine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewLabel {
    pub problem_id: String,
    pub verdict: ReviewVerdict,
    #[serde(default)]
    pub note: String,
    pub reviewer: String,
    pub labeled: DateTime<Utc>,
}

/// A record with its current label from each reviewer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordView {
    pub record: AcceptedProblem,
    pub labels: Vec<ReviewLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Jsonl,
    Markdown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub direction_ids: Option<BTreeSet<u32>>,
    pub run_id: Option<String>,
    pub labeled_only: bool,
    pub verdict: Option<ReviewVerdict>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub per_direction: BTreeMap<u32, usize>,
    pub per_label: BTreeMap<ReviewVerdict, usize>,
    pub labeled_problems: usize,
    pub mean_rounds_used: f64,
    pub usage: UsageTotals,
}

/// Reads a JSONL file. A final line missing its newline is ignored.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match bytes.iter().rposition(|b| *b == b'\n') {
        Some(last) => &bytes[..=last],
        None => &[][..],
    };
    let file = path.file_name().unwrap_or_default().to_string_lossy().to_string();
    let text = std::str::from_utf8(complete).map_err(|e| StoreError::Corrupt {
        file: file.clone(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
            file: file.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Drops a torn (newline-less) tail left by an interrupted append.
fn truncate_torn_tail(path: &Path) -> Result<(), StoreError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    log::warn!("{}: dropping torn tail of {} bytes", path.display(), bytes.len() - keep);
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(keep as u64)?;
    file.sync_all()?;
    Ok(())
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_string(value).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
    line.push('\n');
    let mut file: File = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    file.sync_data()?;
    Ok(())
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    records: Vec<AcceptedProblem>,
    ids: HashSet<String>,
    labels: Vec<ReviewLabel>,
}

impl Store {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| StoreError::StoreUnavailable(format!("{}: {e}", dir.display())))?;
        let corpus = dir.join(CORPUS_FILE);
        let labels = dir.join(LABELS_FILE);
        truncate_torn_tail(&corpus)?;
        truncate_torn_tail(&labels)?;
        Self::load(dir)
    }

    /// Opens without creating or repairing anything.
    pub fn open_read_only(dir: &Path) -> Result<Self, StoreError> {
        if !dir.is_dir() {
            return Err(StoreError::StoreUnavailable(format!(
                "{} is not a directory",
                dir.display()
            )));
        }
        Self::load(dir)
    }

    fn load(dir: &Path) -> Result<Self, StoreError> {
        let records: Vec<AcceptedProblem> = read_jsonl(&dir.join(CORPUS_FILE))?;
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !ids.insert(r.problem_id.clone()) {
                return Err(StoreError::Corrupt {
                    file: CORPUS_FILE.into(),
                    line: i + 1,
                    reason: format!("duplicate problem_id {}", r.problem_id),
                });
            }
        }
        let labels = read_jsonl(&dir.join(LABELS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
            ids,
            labels,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[AcceptedProblem] {
        &self.records
    }

    pub fn get(&self, problem_id: &str) -> Option<&AcceptedProblem> {
        self.records.iter().find(|r| r.problem_id == problem_id)
    }

    pub fn contains(&self, problem_id: &str) -> bool {
        self.ids.contains(problem_id)
    }

    pub fn append_accepted(&mut self, record: &AcceptedProblem) -> Result<String, StoreError> {
        record.validate()?;
        if self.ids.contains(&record.problem_id) {
            return Err(StoreError::DuplicateRecord(record.problem_id.clone()));
        }
        append_line(&self.dir.join(CORPUS_FILE), record)?;
        self.ids.insert(record.problem_id.clone());
        self.records.push(record.clone());
        Ok(record.problem_id.clone())
    }

    /// The full label log, oldest first.
    pub fn label_log(&self) -> &[ReviewLabel] {
        &self.labels
    }

    /// Latest label per (problem_id, reviewer).
    pub fn current_labels(&self) -> BTreeMap<(String, String), &ReviewLabel> {
        let mut current = BTreeMap::new();
        for label in &self.labels {
            current.insert((label.problem_id.clone(), label.reviewer.clone()), label);
        }
        current
    }

    pub fn view(&self, problem_id: &str) -> Result<RecordView, StoreError> {
        let record = self
            .get(problem_id)
            .ok_or_else(|| StoreError::UnknownProblem(problem_id.to_string()))?
            .clone();
        let labels = self
            .current_labels()
            .into_values()
            .filter(|l| l.problem_id == problem_id)
            .cloned()
            .collect();
        Ok(RecordView { record, labels })
    }

    pub fn label(&mut self, label: ReviewLabel) -> Result<RecordView, StoreError> {
        if !self.contains(&label.problem_id) {
            return Err(StoreError::UnknownProblem(label.problem_id));
        }
        if label.reviewer.trim().is_empty() {
            return Err(StoreError::InvalidRecord("reviewer is empty".into()));
        }
        append_line(&self.dir.join(LABELS_FILE), &label)?;
        let id = label.problem_id.clone();
        self.labels.push(label);
        self.view(&id)
    }

    pub fn is_labeled_by(&self, problem_id: &str, reviewer: &str) -> bool {
        self.labels
            .iter()
            .any(|l| l.problem_id == problem_id && l.reviewer == reviewer)
    }

    /// Records sorted by (direction, slot, run, id), filtered by `selection`.
    pub fn select(&self, selection: &Selection) -> Vec<&AcceptedProblem> {
        let current = self.current_labels();
        let mut out: Vec<&AcceptedProblem> = self
            .records
            .iter()
            .filter(|r| {
                selection
                    .direction_ids
                    .as_ref()
                    .is_none_or(|ids| ids.contains(&r.direction_id))
            })
            .filter(|r| selection.run_id.as_ref().is_none_or(|id| *id == r.run_id))
            .filter(|r| {
                let mut labels = current.values().filter(|l| l.problem_id == r.problem_id);
                match (selection.labeled_only, selection.verdict) {
                    (_, Some(v)) => labels.any(|l| l.verdict == v),
                    (true, None) => labels.next().is_some(),
                    (false, None) => true,
                }
            })
            .collect();
        out.sort_by(|a, b| {
            (a.direction_id, a.slot, &a.run_id, &a.problem_id)
                .cmp(&(b.direction_id, b.slot, &b.run_id, &b.problem_id))
        });
        out
    }

    pub fn export(&self, selection: &Selection, format: ExportFormat) -> Vec<u8> {
        let records = self.select(selection);
        match format {
            ExportFormat::Jsonl => export_jsonl(records),
            ExportFormat::Markdown => export_markdown(records),
        }
    }

    pub fn stats(&self) -> Stats {
        let mut stats = Stats {
            total: self.records.len(),
            ..Stats::default()
        };
        for r in &self.records {
            *stats.per_direction.entry(r.direction_id).or_insert(0) += 1;
            stats.usage.add(&r.usage);
        }
        if !self.records.is_empty() {
            let rounds: u64 = self.records.iter().map(|r| r.rounds_used as u64).sum();
            stats.mean_rounds_used = rounds as f64 / self.records.len() as f64;
        }
        let mut labeled = BTreeSet::new();
        for label in self.current_labels().values() {
            *stats.per_label.entry(label.verdict).or_insert(0) += 1;
            labeled.insert(label.problem_id.clone());
        }
        stats.labeled_problems = labeled.len();
        stats
    }
}

pub fn export_jsonl<'a>(records: impl IntoIterator<Item = &'a AcceptedProblem>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r).expect("record serializes"));
        out.push(b'\n');
    }
    out
}

pub fn import_jsonl(bytes: &[u8]) -> Result<Vec<AcceptedProblem>, StoreError> {
    let text = std::str::from_utf8(bytes).map_err(|e| StoreError::Corrupt {
        file: "<import>".into(),
        line: 0,
        reason: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                file: "<import>".into(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Renders problems the way they are presented for human readers:
/// a numbered `problem N:` heading, the statement, then the justification
/// under `Why is it a "good" problem:`.
pub fn export_markdown<'a>(records: impl IntoIterator<Item = &'a AcceptedProblem>) -> Vec<u8> {
    let mut out = String::new();
    for (n, r) in records.into_iter().enumerate() {
        let _ = write!(
            out,
            "<!-- id: {} | direction {} | slot {} | run {} -->\n\
             problem {}:\n\n{}\n\nWhy is it a \"good\" problem:\n\n{}\n\n",
            r.problem_id,
            r.direction_id,
            r.slot,
            r.run_id,
            n + 1,
            r.statement.trim(),
            r.justification.trim()
        );
    }
    out.into_bytes()
}
