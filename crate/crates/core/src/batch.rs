//! Catalog sweep: `k` distinct accepted problems per direction, resumable.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json          slot ledger, atomically replaced on every flush
//! corpus.jsonl           accepted problems (see `store`)
//! labels.jsonl           review labels
//! transcripts/<key>.jsonl  one file per session attempt
//! ```
//!
//! Persistence order for an accepted slot is record append, then manifest
//! flush. A crash between the two leaves an orphan record, which resume
//! reconciles by marking its slot Done without running a session. Every
//! slot therefore ends up with at most one record.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Direction};
use crate::parser::similarity;
use crate::prompts::{self, Message, PromptBundle};
use crate::session::{run_session, Exchange, Session, SessionClients, SessionConfig, SessionKey, SessionStatus};
use crate::store::{Store, StoreError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSCRIPTS_DIR: &str = "transcripts";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("run directory {0} already holds a manifest; use resume")]
    ManifestExists(PathBuf),
    #[error("no manifest in {0}")]
    ManifestMissing(PathBuf),
    #[error("manifest does not match current inputs: {0}")]
    ManifestMismatch(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("invalid batch configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("injected fault at {0:?}")]
    InjectedFault(FaultPoint),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |e| BatchError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub problems_per_direction: u32,
    pub max_parallel_sessions: u32,
    pub distinctness_threshold: f64,
    pub max_attempts_per_slot: u32,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            problems_per_direction: 5,
            max_parallel_sessions: 4,
            distinctness_threshold: 0.90,
            max_attempts_per_slot: 3,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.problems_per_direction == 0 {
            return Err("problems_per_direction must be >= 1".into());
        }
        if self.max_parallel_sessions == 0 {
            return Err("max_parallel_sessions must be >= 1".into());
        }
        if !(self.distinctness_threshold > 0.0 && self.distinctness_threshold < 1.0) {
            return Err(format!(
                "distinctness_threshold {} must be in (0, 1)",
                self.distinctness_threshold
            ));
        }
        if self.max_attempts_per_slot == 0 {
            return Err("max_attempts_per_slot must be >= 1".into());
        }
        Ok(())
    }
}

/// Everything that determines a run's outputs. Parallelism is left out:
/// it may change between run and resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub problems_per_direction: u32,
    pub distinctness_threshold: f64,
    pub max_attempts_per_slot: u32,
    pub directions: Vec<u32>,
    pub session: SessionConfig,
    pub prompt_version: String,
    pub prompt_hash: String,
    pub catalog_checksum: String,
}

impl RunSnapshot {
    pub fn new(
        catalog: &Catalog,
        directions: &[u32],
        batch: &BatchConfig,
        session: &SessionConfig,
        prompts: &PromptBundle,
    ) -> Self {
        Self {
            problems_per_direction: batch.problems_per_direction,
            distinctness_threshold: batch.distinctness_threshold,
            max_attempts_per_slot: batch.max_attempts_per_slot,
            directions: directions.to_vec(),
            session: session.clone(),
            prompt_version: prompts.version.clone(),
            prompt_hash: prompts.content_hash(),
            catalog_checksum: catalog.checksum().to_string(),
        }
    }

    fn diff(&self, other: &RunSnapshot) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.catalog_checksum != other.catalog_checksum {
            out.push("catalog checksum");
        }
        if self.prompt_hash != other.prompt_hash || self.prompt_version != other.prompt_version {
            out.push("prompt bundle");
        }
        if self.directions != other.directions {
            out.push("direction selection");
        }
        if self.session != other.session {
            out.push("session configuration");
        }
        if self.problems_per_direction != other.problems_per_direction
            || self.distinctness_threshold != other.distinctness_threshold
            || self.max_attempts_per_slot != other.max_attempts_per_slot
        {
            out.push("batch configuration");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SlotStatus {
    Pending,
    Done { problem_id: String },
    FailedPermanently { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub direction_id: u32,
    pub slot: u32,
    pub attempts: u32,
    #[serde(flatten)]
    pub status: SlotStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub snapshot: RunSnapshot,
    pub slots: Vec<SlotEntry>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

impl RunManifest {
    pub fn new(run_id: &str, snapshot: RunSnapshot, now: DateTime<Utc>) -> Self {
        let slots = snapshot
            .directions
            .iter()
            .flat_map(|&d| {
                (1..=snapshot.problems_per_direction).map(move |slot| SlotEntry {
                    direction_id: d,
                    slot,
                    attempts: 0,
                    status: SlotStatus::Pending,
                })
            })
            .collect();
        Self {
            run_id: run_id.to_string(),
            snapshot,
            slots,
            created: now,
            updated: now,
        }
    }

    pub fn load(path: &Path) -> Result<Self, BatchError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(BatchError::ManifestMissing(
                    path.parent().unwrap_or(path).to_path_buf(),
                ))
            }
            Err(e) => return Err(io_err(path)(e)),
        };
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| BatchError::CorruptManifest(e.to_string()))?;
        manifest.check_keys()?;
        Ok(manifest)
    }

    fn check_keys(&self) -> Result<(), BatchError> {
        let expected: BTreeSet<(u32, u32)> = self
            .snapshot
            .directions
            .iter()
            .flat_map(|&d| (1..=self.snapshot.problems_per_direction).map(move |s| (d, s)))
            .collect();
        let actual: BTreeSet<(u32, u32)> = self.slots.iter().map(|s| (s.direction_id, s.slot)).collect();
        if expected != actual || actual.len() != self.slots.len() {
            return Err(BatchError::CorruptManifest(
                "slot keys do not match directions × slots".into(),
            ));
        }
        Ok(())
    }

    /// Writes to a temporary file, syncs, then renames over `path`.
    pub fn flush(&self, path: &Path) -> Result<(), BatchError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        atomic_write(path, json.as_bytes())
    }

    pub fn count(&self, pred: impl Fn(&SlotStatus) -> bool) -> usize {
        self.slots.iter().filter(|s| pred(&s.status)).count()
    }

    pub fn done(&self) -> usize {
        self.count(|s| matches!(s, SlotStatus::Done { .. }))
    }

    pub fn failed(&self) -> usize {
        self.count(|s| matches!(s, SlotStatus::FailedPermanently { .. }))
    }

    pub fn pending(&self) -> usize {
        self.count(|s| matches!(s, SlotStatus::Pending))
    }

    pub fn is_complete(&self) -> bool {
        self.pending() == 0
    }

    pub fn total_attempts(&self) -> u32 {
        self.slots.iter().map(|s| s.attempts).sum()
    }

    fn entry_mut(&mut self, direction_id: u32, slot: u32) -> &mut SlotEntry {
        self.slots
            .iter_mut()
            .find(|s| s.direction_id == direction_id && s.slot == slot)
            .expect("slot key exists")
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), BatchError> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        if let Ok(dir) = std::fs::File::open(parent) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn transcripts_dir(&self) -> PathBuf {
        self.root.join(TRANSCRIPTS_DIR)
    }

    pub fn has_manifest(&self) -> bool {
        self.manifest_path().exists()
    }

    pub fn write_transcript(&self, session: &Session) -> Result<(), BatchError> {
        let dir = self.transcripts_dir();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut bytes = Vec::new();
        for ex in &session.exchanges {
            bytes.extend(serde_json::to_vec(ex).expect("exchange serializes"));
            bytes.push(b'\n');
        }
        atomic_write(&dir.join(format!("{}.jsonl", session.key.label())), &bytes)
    }

    /// All recorded exchanges, ordered by transcript file name.
    pub fn load_transcripts(&self) -> Result<Vec<Exchange>, BatchError> {
        let dir = self.transcripts_dir();
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        files.sort();
        let mut out = Vec::new();
        for file in files {
            let text = std::fs::read_to_string(&file).map_err(io_err(&file))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                out.push(serde_json::from_str(line).map_err(|e| BatchError::Io {
                    path: file.display().to_string(),
                    reason: e.to_string(),
                })?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    AfterTranscript,
    AfterRecordAppend,
    AfterManifestFlush,
}

/// A persistence step, reported to the [`FaultInjector`] right after it
/// completes. `sequence` counts slot completions (Done or failed) in this
/// process, starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPoint {
    pub kind: FaultKind,
    pub direction_id: u32,
    pub slot: u32,
    pub sequence: u32,
}

/// Test hook for simulating a crash at a persistence boundary. Returning
/// `true` aborts the batch immediately with [`BatchError::InjectedFault`].
pub trait FaultInjector: Sync {
    fn should_fail(&self, point: &FaultPoint) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchEvent {
    SlotStarted {
        direction_id: u32,
        slot: u32,
        attempt: u32,
    },
    SessionFinished {
        direction_id: u32,
        slot: u32,
        attempt: u32,
        status: SessionStatus,
        duplicate: bool,
    },
    SlotFinished {
        direction_id: u32,
        slot: u32,
        status: SlotStatus,
    },
    Reconciled {
        direction_id: u32,
        slot: u32,
        problem_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSlot {
    pub direction_id: u32,
    pub slot: u32,
    pub first_messages: Vec<Message>,
}

/// Slots a run would execute and the first-round generator request for each.
/// Performs no I/O and no model calls.
pub fn plan_batch(
    catalog: &Catalog,
    directions: &[u32],
    config: &BatchConfig,
    prompts: &PromptBundle,
) -> Result<Vec<PlannedSlot>, BatchError> {
    let mut out = Vec::new();
    for &id in directions {
        let direction = catalog
            .get(id)
            .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        for slot in 1..=config.problems_per_direction {
            out.push(PlannedSlot {
                direction_id: id,
                slot,
                first_messages: vec![
                    Message::system(prompts.generator_system.clone()),
                    prompts::initial_user_message(direction),
                ],
            });
        }
    }
    Ok(out)
}

/// Inputs shared by `run` and `resume`.
pub struct BatchRunner<'a> {
    pub catalog: &'a Catalog,
    /// Direction ids to sweep; empty means the whole catalog.
    pub directions: Vec<u32>,
    pub config: &'a BatchConfig,
    pub session: &'a SessionConfig,
    pub prompts: &'a PromptBundle,
    pub clients: SessionClients<'a>,
    pub run_dir: RunDir,
    pub faults: Option<&'a dyn FaultInjector>,
    pub on_event: Option<&'a (dyn Fn(&BatchEvent) + Sync)>,
}

struct Shared {
    manifest: RunManifest,
    store: Store,
    completed: u32,
}

impl BatchRunner<'_> {
    fn direction_ids(&self) -> Vec<u32> {
        if self.directions.is_empty() {
            self.catalog.directions().iter().map(|d| d.id).collect()
        } else {
            self.directions.clone()
        }
    }

    fn snapshot(&self) -> RunSnapshot {
        RunSnapshot::new(
            self.catalog,
            &self.direction_ids(),
            self.config,
            self.session,
            self.prompts,
        )
    }

    fn validate(&self) -> Result<(), BatchError> {
        self.config.validate().map_err(BatchError::InvalidConfig)?;
        self.session.validate().map_err(BatchError::InvalidConfig)?;
        for id in self.direction_ids() {
            self.catalog
                .get(id)
                .map_err(|e| BatchError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    fn now(&self) -> DateTime<Utc> {
        self.clients.generator.clock().now()
    }

    fn emit(&self, event: BatchEvent) {
        if let Some(f) = self.on_event {
            f(&event);
        }
    }

    /// Raises the abort flag while the caller still holds the writer lock,
    /// so no other worker persists anything after a simulated crash.
    fn fault(&self, point: FaultPoint, abort: &AtomicBool) -> Result<(), BatchError> {
        match self.faults {
            Some(f) if f.should_fail(&point) => {
                abort.store(true, Ordering::SeqCst);
                Err(BatchError::InjectedFault(point))
            }
            _ => Ok(()),
        }
    }

    /// Starts a fresh run. Fails if the run directory already has a manifest.
    pub fn run(&self, run_id: &str) -> Result<RunManifest, BatchError> {
        self.validate()?;
        if self.run_dir.has_manifest() {
            return Err(BatchError::ManifestExists(self.run_dir.root().to_path_buf()));
        }
        let store = Store::open(self.run_dir.root())?;
        let manifest = RunManifest::new(run_id, self.snapshot(), self.now());
        manifest.flush(&self.run_dir.manifest_path())?;
        self.execute(manifest, store)
    }

    /// Continues the run recorded in the run directory.
    pub fn resume(&self) -> Result<RunManifest, BatchError> {
        self.validate()?;
        let mut manifest = RunManifest::load(&self.run_dir.manifest_path())?;
        let diff = manifest.snapshot.diff(&self.snapshot());
        if !diff.is_empty() {
            return Err(BatchError::ManifestMismatch(diff.join(", ")));
        }
        let store = Store::open(self.run_dir.root())?;

        for entry in &manifest.slots {
            if let SlotStatus::Done { problem_id } = &entry.status {
                if !store.contains(problem_id) {
                    return Err(BatchError::CorruptManifest(format!(
                        "slot ({}, {}) references missing record {problem_id}",
                        entry.direction_id, entry.slot
                    )));
                }
            }
        }

        // Records appended before a crash that never reached the manifest.
        let mut reconciled = false;
        let run_id = manifest.run_id.clone();
        for record in store.records().iter().filter(|r| r.run_id == run_id) {
            let Some(entry) = manifest
                .slots
                .iter_mut()
                .find(|s| s.direction_id == record.direction_id && s.slot == record.slot)
            else {
                return Err(BatchError::CorruptManifest(format!(
                    "record {} has no slot in the manifest",
                    record.problem_id
                )));
            };
            if entry.status == SlotStatus::Pending {
                entry.status = SlotStatus::Done {
                    problem_id: record.problem_id.clone(),
                };
                entry.attempts = entry.attempts.max(1);
                reconciled = true;
                self.emit(BatchEvent::Reconciled {
                    direction_id: record.direction_id,
                    slot: record.slot,
                    problem_id: record.problem_id.clone(),
                });
            }
        }
        if reconciled {
            manifest.updated = self.now();
            manifest.flush(&self.run_dir.manifest_path())?;
        }
        if manifest.is_complete() {
            return Ok(manifest);
        }
        self.execute(manifest, store)
    }

    fn execute(&self, manifest: RunManifest, store: Store) -> Result<RunManifest, BatchError> {
        let queue: VecDeque<u32> = manifest
            .snapshot
            .directions
            .iter()
            .copied()
            .filter(|&d| {
                manifest
                    .slots
                    .iter()
                    .any(|s| s.direction_id == d && s.status == SlotStatus::Pending)
            })
            .collect();
        let workers = (self.config.max_parallel_sessions as usize).min(queue.len()).max(1);
        let queue = Mutex::new(queue);
        let shared = Mutex::new(Shared {
            manifest,
            store,
            completed: 0,
        });
        let abort = AtomicBool::new(false);
        let first_error: Mutex<Option<BatchError>> = Mutex::new(None);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let Some(direction_id) = queue.lock().unwrap().pop_front() else {
                        break;
                    };
                    let direction = self.catalog.get(direction_id).expect("validated").clone();
                    if let Err(e) = self.run_direction(&direction, &shared, &abort) {
                        abort.store(true, Ordering::SeqCst);
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                });
            }
        });

        if let Some(err) = first_error.into_inner().unwrap() {
            return Err(err);
        }
        Ok(shared.into_inner().unwrap().manifest)
    }

    /// Slots of one direction run sequentially so the comparison set used for
    /// distinctness is stable.
    fn run_direction(
        &self,
        direction: &Direction,
        shared: &Mutex<Shared>,
        abort: &AtomicBool,
    ) -> Result<(), BatchError> {
        let (run_id, pending): (String, Vec<(u32, u32)>) = {
            let guard = shared.lock().unwrap();
            let pending = guard
                .manifest
                .slots
                .iter()
                .filter(|s| s.direction_id == direction.id && s.status == SlotStatus::Pending)
                .map(|s| (s.slot, s.attempts))
                .collect();
            (guard.manifest.run_id.clone(), pending)
        };
        let max_attempts = self.config.max_attempts_per_slot;

        for (slot, prior_attempts) in pending {
            let mut attempt = prior_attempts;
            while attempt < max_attempts {
                if abort.load(Ordering::SeqCst) {
                    return Ok(());
                }
                attempt += 1;
                self.emit(BatchEvent::SlotStarted {
                    direction_id: direction.id,
                    slot,
                    attempt,
                });
                let key = SessionKey::new(&run_id, direction.id, slot, attempt);
                let session = run_session(direction, key, &self.clients, self.session, self.prompts);
                if self.persist(direction.id, slot, attempt, &session, shared, abort)? {
                    break;
                }
            }
        }
        Ok(())
    }

    /// Records one session's outcome. Returns true when the slot reached a
    /// terminal state.
    fn persist(
        &self,
        direction_id: u32,
        slot: u32,
        attempt: u32,
        session: &Session,
        shared: &Mutex<Shared>,
        abort: &AtomicBool,
    ) -> Result<bool, BatchError> {
        let mut guard = shared.lock().unwrap();
        if abort.load(Ordering::SeqCst) {
            return Ok(true);
        }
        let sequence = guard.completed + 1;
        let point = |kind| FaultPoint {
            kind,
            direction_id,
            slot,
            sequence,
        };
        self.run_dir.write_transcript(session)?;
        self.fault(point(FaultKind::AfterTranscript), abort)?;

        let mut duplicate = false;
        let mut done_id = None;
        if let (SessionStatus::Accepted, Some(record)) = (session.status, &session.accepted) {
            let run_id = guard.manifest.run_id.clone();
            duplicate = guard
                .store
                .records()
                .iter()
                .filter(|r| r.run_id == run_id && r.direction_id == direction_id)
                .any(|r| similarity(&r.statement, &record.statement) >= self.config.distinctness_threshold);
            if !duplicate {
                let id = guard.store.append_accepted(record)?;
                self.fault(point(FaultKind::AfterRecordAppend), abort)?;
                done_id = Some(id);
            }
        }
        self.emit(BatchEvent::SessionFinished {
            direction_id,
            slot,
            attempt,
            status: session.status,
            duplicate,
        });

        let status = match done_id {
            Some(problem_id) => SlotStatus::Done { problem_id },
            None if attempt >= self.config.max_attempts_per_slot => SlotStatus::FailedPermanently {
                reason: if duplicate {
                    "accepted problem duplicated an earlier one in this direction".to_string()
                } else {
                    format!(
                        "{:?}{}",
                        session.status,
                        session.failure.as_deref().map(|f| format!(": {f}")).unwrap_or_default()
                    )
                },
            },
            None => SlotStatus::Pending,
        };
        let terminal = status != SlotStatus::Pending;
        let now = self.now();
        let entry = guard.manifest.entry_mut(direction_id, slot);
        entry.attempts = attempt;
        entry.status = status.clone();
        guard.manifest.updated = now;
        guard.manifest.flush(&self.run_dir.manifest_path())?;
        if terminal {
            guard.completed += 1;
            self.fault(point(FaultKind::AfterManifestFlush), abort)?;
            drop(guard);
            self.emit(BatchEvent::SlotFinished {
                direction_id,
                slot,
                status,
            });
        }
        Ok(terminal)
    }
}
