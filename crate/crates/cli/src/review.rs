//! Terminal labeling loop over accepted problems.

use std::io::{BufRead, Write};

use anyhow::Result;
use dmgen_core::catalog::Catalog;
use dmgen_core::clock::Clock;
use dmgen_core::store::{ReviewLabel, ReviewVerdict, Selection, Store};

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ReviewSummary {
    pub labeled: usize,
    pub skipped: usize,
    pub remaining: usize,
}

fn verdict_for(key: &str) -> Option<ReviewVerdict> {
    match key {
        "u" => Some(ReviewVerdict::UnknownToExperts),
        "k" => Some(ReviewVerdict::KnownOrOverlapsLiterature),
        "i" => Some(ReviewVerdict::IllPosed),
        "t" => Some(ReviewVerdict::TrivialOrRoutine),
        _ => None,
    }
}

const MENU: &str = "[u] unknown to experts  [k] known / overlaps literature  [i] ill-posed  \
[t] trivial or routine  [s] skip  [q] quit";

/// Walks problems not yet labeled by `reviewer` in (direction, slot) order.
/// Each label is persisted before the next problem is shown, so stopping at
/// any point (including end of input) keeps everything labeled so far.
pub fn review(
    store: &mut Store,
    catalog: &Catalog,
    reviewer: &str,
    clock: &dyn Clock,
    mut input: impl BufRead,
    mut out: impl Write,
) -> Result<ReviewSummary> {
    let queue: Vec<_> = store
        .select(&Selection::default())
        .into_iter()
        .filter(|r| !store.is_labeled_by(&r.problem_id, reviewer))
        .cloned()
        .collect();
    let mut summary = ReviewSummary {
        remaining: queue.len(),
        ..ReviewSummary::default()
    };
    if queue.is_empty() {
        writeln!(out, "Nothing to review for {reviewer}.")?;
        return Ok(summary);
    }

    let read_line = |input: &mut dyn BufRead| -> Result<Option<String>> {
        let mut line = String::new();
        Ok((input.read_line(&mut line)? > 0).then(|| line.trim().to_string()))
    };

    let total = queue.len();
    'problems: for (i, record) in queue.iter().enumerate() {
        let title = catalog
            .get(record.direction_id)
            .map(|d| d.title.as_str())
            .unwrap_or("(direction not in catalog)");
        writeln!(out, "\n[{}/{}] {}  direction {} slot {}", i + 1, total, record.problem_id, record.direction_id, record.slot)?;
        writeln!(out, "{title}\n")?;
        writeln!(out, "problem:\n\n{}\n", record.statement)?;
        writeln!(out, "Why is it a \"good\" problem:\n\n{}\n", record.justification)?;

        loop {
            write!(out, "{MENU}\n> ")?;
            out.flush()?;
            let Some(key) = read_line(&mut input)? else {
                break 'problems;
            };
            let key = key.to_lowercase();
            if key == "q" {
                break 'problems;
            }
            if key == "s" {
                summary.skipped += 1;
                summary.remaining -= 1;
                continue 'problems;
            }
            let Some(verdict) = verdict_for(&key) else {
                writeln!(out, "Unrecognized choice {key:?}.")?;
                continue;
            };
            write!(out, "note (optional)> ")?;
            out.flush()?;
            let note = read_line(&mut input)?.unwrap_or_default();
            store.label(ReviewLabel {
                problem_id: record.problem_id.clone(),
                verdict,
                note,
                reviewer: reviewer.to_string(),
                labeled: clock.now(),
            })?;
            summary.labeled += 1;
            summary.remaining -= 1;
            writeln!(out, "Recorded {}.", verdict.as_str())?;
            continue 'problems;
        }
    }
    writeln!(
        out,
        "\n{} labeled, {} skipped, {} not reviewed.",
        summary.labeled, summary.skipped, summary.remaining
    )?;
    Ok(summary)
}
