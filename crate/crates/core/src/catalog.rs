//! The research-direction catalog.
//!
//! Two hundred directions in differential geometry, twenty in each of ten
//! categories. The shipped data file is line-oriented and tab-separated:
//!
//! ```text
//! # comment
//! <id>\t<category>\t<title>
//! ```
//!
//! Titles keep their LaTeX fragments verbatim because they are handed to the
//! generator as-is.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The catalog file compiled into the crate.
pub const SHIPPED_CATALOG: &str = include_str!("../data/catalog.tsv");

pub const DIRECTION_COUNT: usize = 200;
pub const PER_CATEGORY: usize = 20;

/// Category headings, in catalog order. Index `i` is category number `i + 1`.
pub const CATEGORIES: [&str; 10] = [
    "Minimal Submanifolds in Spheres and Space Forms",
    "Harmonic Maps and Their Generalizations",
    "Manifolds with Nonnegative Sectional Curvature",
    "Positive Sectional Curvature and Sphere Theorems",
    "Ricci Curvature and Geometric Flows",
    "Comparison Geometry and Synthetic Curvature Bounds",
    "Geometric Analysis and PDEs on Manifolds",
    "Special Structures: Kähler, Quaternion-Kähler, and Spin Geometry",
    "Homogeneous Spaces and Lie Groups",
    "Sub-Riemannian Geometry and Generalizations",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("malformed catalog at line {line}: {reason}")]
    MalformedCatalog { line: usize, reason: String },
    #[error("catalog count mismatch: {0}")]
    CountMismatch(String),
    #[error("duplicate direction id {0}")]
    DuplicateId(u32),
    #[error("unknown direction id {0}")]
    UnknownDirection(u32),
    #[error("unknown category number {0} (expected 1..=10)")]
    UnknownCategory(usize),
    #[error("failed to read catalog {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub id: u32,
    pub category: String,
    pub title: String,
}

impl Direction {
    /// 1-based category number.
    pub fn category_number(&self) -> usize {
        CATEGORIES
            .iter()
            .position(|c| *c == self.category)
            .map(|i| i + 1)
            .unwrap_or(0)
    }
}

/// Validated, immutable catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    directions: Vec<Direction>,
    checksum: String,
}

impl Catalog {
    /// The catalog bundled with this crate.
    pub fn shipped() -> Self {
        load_catalog(SHIPPED_CATALOG).expect("shipped catalog is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|e| CatalogError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        load_catalog(&text)
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn get(&self, id: u32) -> Result<&Direction, CatalogError> {
        get_direction(self, id)
    }

    /// Directions in category `number` (1-based), in catalog order.
    pub fn by_category(&self, number: usize) -> Result<Vec<&Direction>, CatalogError> {
        let name = number
            .checked_sub(1)
            .and_then(|i| CATEGORIES.get(i))
            .ok_or(CatalogError::UnknownCategory(number))?;
        Ok(self.directions.iter().filter(|d| d.category == *name).collect())
    }

    pub fn category_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.directions {
            *counts.entry(d.category.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Canonical text form: one `id\tcategory\ttitle` line per direction, sorted by id.
pub fn canonical_serialization(directions: &[Direction]) -> String {
    let mut out = String::new();
    for d in directions {
        let _ = writeln!(out, "{}\t{}\t{}", d.id, d.category, d.title);
    }
    out
}

pub fn load_catalog(source: &str) -> Result<Catalog, CatalogError> {
    let mut directions = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| CatalogError::MalformedCatalog {
            line: line_no,
            reason: reason.to_string(),
        };
        let mut fields = line.splitn(3, '\t');
        let (id, category, title) = match (fields.next(), fields.next(), fields.next()) {
            (Some(id), Some(category), Some(title)) => (id, category, title),
            _ => return Err(malformed("expected 3 tab-separated fields")),
        };
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| malformed("id is not a positive integer"))?;
        let category = category.trim();
        if !CATEGORIES.contains(&category) {
            return Err(malformed(&format!("unknown category {category:?}")));
        }
        let title = title.trim();
        if title.is_empty() {
            return Err(malformed("empty title"));
        }
        if !seen.insert(id) {
            return Err(CatalogError::DuplicateId(id));
        }
        directions.push(Direction {
            id,
            category: category.to_string(),
            title: title.to_string(),
        });
    }

    if directions.len() != DIRECTION_COUNT {
        return Err(CatalogError::CountMismatch(format!(
            "expected {DIRECTION_COUNT} directions, found {}",
            directions.len()
        )));
    }
    for category in CATEGORIES {
        let n = directions.iter().filter(|d| d.category == category).count();
        if n != PER_CATEGORY {
            return Err(CatalogError::CountMismatch(format!(
                "category {category:?} has {n} directions, expected {PER_CATEGORY}"
            )));
        }
    }
    directions.sort_by_key(|d| d.id);
    // 200 unique ids sorted; contiguity means the last one is 200.
    if directions.first().map(|d| d.id) != Some(1)
        || directions.last().map(|d| d.id) != Some(DIRECTION_COUNT as u32)
    {
        return Err(CatalogError::CountMismatch(
            "direction ids are not contiguous 1..=200".to_string(),
        ));
    }

    let checksum = hex::encode(Sha256::digest(canonical_serialization(&directions).as_bytes()));
    Ok(Catalog {
        directions,
        checksum,
    })
}

pub fn get_direction(catalog: &Catalog, id: u32) -> Result<&Direction, CatalogError> {
    if id == 0 || id as usize > catalog.directions.len() {
        return Err(CatalogError::UnknownDirection(id));
    }
    // ids are contiguous and sorted after validation
    Ok(&catalog.directions[id as usize - 1])
}

/// Parses `"7"`, `"1-2"`, `"1,3,10-12"` into sorted unique ids.
pub fn parse_id_ranges(spec: &str) -> Result<Vec<u32>, String> {
    let mut ids = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: u32 = lo.parse().map_err(|_| format!("bad id {lo:?} in {spec:?}"))?;
        let hi: u32 = hi.parse().map_err(|_| format!("bad id {hi:?} in {spec:?}"))?;
        if lo > hi {
            return Err(format!("empty range {part:?}"));
        }
        ids.extend(lo..=hi);
    }
    if ids.is_empty() {
        return Err(format!("no ids in {spec:?}"));
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}
