mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use common::*;
use dmgen_core::batch::{
    plan_batch, BatchError, BatchEvent, FaultKind, RunDir, RunManifest, SlotStatus, MANIFEST_FILE,
};
use dmgen_core::catalog::{load_catalog, Catalog, SHIPPED_CATALOG};
use dmgen_core::client::{ScriptEntry, ScriptedTransport};
use dmgen_core::parser::similarity;
use dmgen_core::session::SessionConfig;
use dmgen_core::store::{Store, CORPUS_FILE};

const DIRS: [u32; 2] = [58, 41];

fn distinct_generator(offset: u64) -> Arc<ScriptedTransport> {
    Arc::new(ScriptedTransport::new(replies(offset..offset + 40)))
}

#[test]
fn mini_batch_fills_every_slot_with_distinct_problems() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(5, 2);
    let session = session_config();
    let bundle = prompts();
    let harness = Harness::new(distinct_generator(0), echo_evaluator());

    let manifest = runner(&catalog, &DIRS, &config, &session, &bundle, &harness, dir.path())
        .run("run-1")
        .unwrap();
    assert_eq!(manifest.done(), 10);
    assert!(manifest.is_complete());

    let store = Store::open_read_only(dir.path()).unwrap();
    assert_eq!(store.records().len(), 10);
    let keys: BTreeSet<_> = store.records().iter().map(|r| (r.direction_id, r.slot)).collect();
    assert_eq!(keys.len(), 10);
    for d in DIRS {
        let texts: Vec<_> = store
            .records()
            .iter()
            .filter(|r| r.direction_id == d)
            .map(|r| r.statement.as_str())
            .collect();
        assert_eq!(texts.len(), 5);
        for i in 0..texts.len() {
            for j in i + 1..texts.len() {
                assert!(similarity(texts[i], texts[j]) < 0.90);
            }
        }
    }
    for entry in &manifest.slots {
        let SlotStatus::Done { problem_id } = &entry.status else {
            panic!("slot not done: {entry:?}");
        };
        let record = store.get(problem_id).unwrap();
        assert_eq!((record.direction_id, record.slot), (entry.direction_id, entry.slot));
    }

    let on_disk = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, manifest);
    assert_eq!(RunDir::new(dir.path()).load_transcripts().unwrap().len(), 20);
}

#[test]
fn duplicate_outputs_fail_the_slot_after_max_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(3, 1);
    let session = session_config();
    let bundle = prompts();
    let gen = Arc::new(ScriptedTransport::cycling(replies(0..1)));
    let harness = Harness::new(gen.clone(), echo_evaluator());

    let manifest = runner(&catalog, &[58], &config, &session, &bundle, &harness, dir.path())
        .run("run-dup")
        .unwrap();
    assert!(matches!(manifest.slots[0].status, SlotStatus::Done { .. }));
    for entry in &manifest.slots[1..] {
        assert!(matches!(entry.status, SlotStatus::FailedPermanently { .. }), "{entry:?}");
        assert_eq!(entry.attempts, config.max_attempts_per_slot);
    }
    assert_eq!(gen.call_count(), 1 + 2 * 3);
    assert_eq!(Store::open_read_only(dir.path()).unwrap().records().len(), 1);
}

#[test]
fn failed_sessions_are_retried_then_given_up() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(1, 1);
    let session = SessionConfig {
        max_rounds: 2,
        ..session_config()
    };
    let bundle = prompts();
    let gen = Arc::new(ScriptedTransport::cycling(replies(0..5)));
    let eval = Arc::new(ScriptedTransport::cycling(vec![ScriptEntry::reply(CRITIQUE)]));
    let harness = Harness::new(gen.clone(), eval);
    let manifest = runner(&catalog, &[1], &config, &session, &bundle, &harness, dir.path())
        .run("run-x")
        .unwrap();
    let SlotStatus::FailedPermanently { reason } = &manifest.slots[0].status else {
        panic!("expected failure");
    };
    assert!(reason.contains("Exhausted"));
    assert_eq!(gen.call_count(), 3 * 2);
}

#[test]
fn full_catalog_plan_has_1000_slots() {
    let catalog = Catalog::shipped();
    let ids: Vec<u32> = catalog.directions().iter().map(|d| d.id).collect();
    let config = batch_config(5, 4);
    let plan = plan_batch(&catalog, &ids, &config, &prompts()).unwrap();
    assert_eq!(plan.len(), 1000);
    assert!(plan[0].first_messages[1].content.contains(&catalog.get(1).unwrap().title));
    let snapshot = dmgen_core::batch::RunSnapshot::new(&catalog, &ids, &config, &session_config(), &prompts());
    let manifest = RunManifest::new("r", snapshot, chrono::Utc::now());
    assert_eq!(manifest.slots.len(), 1000);
    assert_eq!(manifest.pending(), 1000);
}

fn crash_then_resume(kind: FaultKind, after: u32, parallel: u32) -> (usize, RunManifest, Store) {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(5, parallel);
    let session = session_config();
    let bundle = prompts();

    let first = Harness::new(distinct_generator(0), echo_evaluator());
    let fault = FailAt { kind, sequence: after };
    let mut r = runner(&catalog, &DIRS, &config, &session, &bundle, &first, dir.path());
    r.faults = Some(&fault);
    match r.run("run-crash") {
        Err(BatchError::InjectedFault(p)) => assert_eq!(p.sequence, after),
        other => panic!("expected injected fault, got {other:?}"),
    }

    // A fresh process: new clients, new script.
    let gen = distinct_generator(1_000);
    let second = Harness::new(gen.clone(), echo_evaluator());
    let manifest = runner(&catalog, &DIRS, &config, &session, &bundle, &second, dir.path())
        .resume()
        .unwrap();
    let store = Store::open_read_only(dir.path()).unwrap();
    (gen.call_count(), manifest, store)
}

#[test]
fn crash_after_three_slots_resumes_with_seven_sessions() {
    for kind in [FaultKind::AfterRecordAppend, FaultKind::AfterManifestFlush] {
        let (sessions, manifest, store) = crash_then_resume(kind, 3, 1);
        assert_eq!(sessions, 7, "{kind:?}");
        assert_eq!(manifest.done(), 10);
        assert_eq!(store.records().len(), 10);
    }
}

#[test]
fn crash_at_every_slot_is_exactly_once() {
    for kind in [
        FaultKind::AfterTranscript,
        FaultKind::AfterRecordAppend,
        FaultKind::AfterManifestFlush,
    ] {
        for after in 1..=9 {
            let (_, manifest, store) = crash_then_resume(kind, after, 2);
            assert_eq!(store.records().len(), 10, "{kind:?} after {after}");
            let keys: BTreeSet<_> = store.records().iter().map(|r| (r.direction_id, r.slot)).collect();
            assert_eq!(keys.len(), 10);
            assert_eq!(manifest.done(), 10);
        }
    }
}

#[test]
fn orphan_record_is_reconciled_without_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(1, 1);
    let session = session_config();
    let bundle = prompts();
    let first = Harness::new(distinct_generator(0), echo_evaluator());
    let fault = FailAt {
        kind: FaultKind::AfterRecordAppend,
        sequence: 1,
    };
    let mut r = runner(&catalog, &[7], &config, &session, &bundle, &first, dir.path());
    r.faults = Some(&fault);
    assert!(r.run("run-o").is_err());

    let gen = distinct_generator(500);
    let second = Harness::new(gen.clone(), echo_evaluator());
    let events = Mutex::new(Vec::new());
    let record_event = |e: &BatchEvent| events.lock().unwrap().push(e.clone());
    let mut r = runner(&catalog, &[7], &config, &session, &bundle, &second, dir.path());
    r.on_event = Some(&record_event);
    let manifest = r.resume().unwrap();
    assert_eq!(manifest.done(), 1);
    assert_eq!(gen.call_count(), 0);
    assert!(matches!(events.lock().unwrap()[0], BatchEvent::Reconciled { direction_id: 7, slot: 1, .. }));
}

#[test]
fn resume_of_a_finished_run_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(5, 2);
    let session = session_config();
    let bundle = prompts();
    let first = Harness::new(distinct_generator(0), echo_evaluator());
    let done = runner(&catalog, &DIRS, &config, &session, &bundle, &first, dir.path())
        .run("run-2")
        .unwrap();
    let before = std::fs::read(dir.path().join(CORPUS_FILE)).unwrap();

    let gen = distinct_generator(0);
    let eval = echo_evaluator();
    let second = Harness::new(gen.clone(), eval.clone());
    let again = runner(&catalog, &DIRS, &config, &session, &bundle, &second, dir.path())
        .resume()
        .unwrap();
    assert_eq!(again, done);
    assert_eq!(gen.call_count() + eval.call_count(), 0);
    assert_eq!(std::fs::read(dir.path().join(CORPUS_FILE)).unwrap(), before);
}

#[test]
fn resume_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(1, 1);
    let session = session_config();
    let bundle = prompts();
    let first = Harness::new(distinct_generator(0), echo_evaluator());
    let fault = FailAt {
        kind: FaultKind::AfterManifestFlush,
        sequence: 1,
    };
    let mut r = runner(&catalog, &DIRS, &config, &session, &bundle, &first, dir.path());
    r.faults = Some(&fault);
    assert!(r.run("run-m").is_err());

    let harness = Harness::new(distinct_generator(0), echo_evaluator());
    let edited = load_catalog(&SHIPPED_CATALOG.replace("exotic spheres", "exotic 7-spheres")).unwrap();
    let err = runner(&edited, &DIRS, &config, &session, &bundle, &harness, dir.path())
        .resume()
        .unwrap_err();
    assert!(matches!(&err, BatchError::ManifestMismatch(m) if m.contains("catalog")), "{err}");

    let other_session = SessionConfig {
        max_rounds: 3,
        ..session.clone()
    };
    let err = runner(&catalog, &DIRS, &config, &other_session, &bundle, &harness, dir.path())
        .resume()
        .unwrap_err();
    assert!(matches!(err, BatchError::ManifestMismatch(_)));

    let err = runner(&catalog, &[58], &config, &session, &bundle, &harness, dir.path())
        .resume()
        .unwrap_err();
    assert!(matches!(err, BatchError::ManifestMismatch(_)));

    // Parallelism may change between run and resume.
    let wider = batch_config(1, 8);
    let manifest = runner(&catalog, &DIRS, &wider, &session, &bundle, &harness, dir.path())
        .resume()
        .unwrap();
    assert_eq!(manifest.done(), 2);
}

#[test]
fn run_refuses_an_existing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(1, 1);
    let session = session_config();
    let bundle = prompts();
    let harness = Harness::new(distinct_generator(0), echo_evaluator());
    let r = runner(&catalog, &[3], &config, &session, &bundle, &harness, dir.path());
    r.run("a").unwrap();
    assert!(matches!(r.run("b"), Err(BatchError::ManifestExists(_))));
}

#[test]
fn corrupt_or_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let config = batch_config(1, 1);
    let session = session_config();
    let bundle = prompts();
    let harness = Harness::new(distinct_generator(0), echo_evaluator());
    let r = runner(&catalog, &[3], &config, &session, &bundle, &harness, dir.path());
    assert!(matches!(r.resume(), Err(BatchError::ManifestMissing(_))));
    std::fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(matches!(r.resume(), Err(BatchError::CorruptManifest(_))));
}

#[test]
fn invalid_batch_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = Catalog::shipped();
    let session = session_config();
    let bundle = prompts();
    let harness = Harness::new(distinct_generator(0), echo_evaluator());
    for config in [batch_config(0, 1), batch_config(1, 0)] {
        let r = runner(&catalog, &[3], &config, &session, &bundle, &harness, dir.path());
        assert!(matches!(r.run("x"), Err(BatchError::InvalidConfig(_))));
    }
    let config = batch_config(1, 1);
    let r = runner(&catalog, &[201], &config, &session, &bundle, &harness, dir.path());
    assert!(matches!(r.run("x"), Err(BatchError::InvalidConfig(_))));
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}
