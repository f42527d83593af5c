//! Normalised log-transformed citation score (NLCS).
//!
//! For an article with `c` citations, `l = ln(1 + c)`. Each field/year cell
//! has a reference mean of `l` over every record in the snapshot that lists
//! the cell. An article in several cells is normalised by the mean of its
//! cell means: `NLCS = l / mean(cell means)`. The reference universe is the
//! supplied citations file, not the scored subset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tabular::{self, fmt_f64, TableError};
use crate::ArticleScores;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IndicatorError {
    #[error("article `{article_id}`: cell {cell} is not in the reference for snapshot `{snapshot_id}`")]
    UnknownCell {
        article_id: String,
        snapshot_id: String,
        cell: Cell,
    },
    #[error("article `{article_id}`: reference mean is 0 but ln(1+c) = {l} (inconsistent reference)")]
    InconsistentReference { article_id: String, l: f64 },
    #[error("article `{article_id}` has no field/year cells")]
    NoCells { article_id: String },
    #[error("{source_name}:{line}: duplicate article `{article_id}`")]
    DuplicateArticle {
        source_name: String,
        line: u64,
        article_id: String,
    },
    #[error("{source_name}:{line}: {message}")]
    Row {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A (field, publication year) normalisation stratum.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub field_id: String,
    pub year: i32,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.field_id, self.year)
    }
}

/// Parses `field:year`, splitting on the last colon so field ids may
/// contain colons.
pub fn parse_cell(text: &str) -> Result<Cell, String> {
    let text = text.trim();
    let (field, year) = text
        .rsplit_once(':')
        .ok_or_else(|| format!("cell `{text}` is not field:year"))?;
    let field = field.trim();
    if field.is_empty() {
        return Err(format!("cell `{text}` has an empty field id"));
    }
    let year = year
        .trim()
        .parse::<i32>()
        .map_err(|_| format!("cell `{text}` has a non-integer year"))?;
    Ok(Cell {
        field_id: field.to_owned(),
        year,
    })
}

/// Parses a `;`-separated cell list; duplicates collapse.
pub fn parse_cells(text: &str) -> Result<BTreeSet<Cell>, String> {
    text.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(parse_cell)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationRecord {
    pub article_id: String,
    pub snapshot_id: String,
    pub raw_count: u64,
    pub cells: BTreeSet<Cell>,
}

impl CitationRecord {
    pub fn log_count(&self) -> f64 {
        (self.raw_count as f64).ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldYearReference {
    pub snapshot_id: String,
    pub means: BTreeMap<Cell, f64>,
    pub counts: BTreeMap<Cell, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlcsValue {
    pub article_id: String,
    pub snapshot_id: String,
    pub value: f64,
    /// Set when the article and its cells are all uncited, so the value is
    /// the 0/0 convention of 1.0 rather than a ratio.
    pub zero_reference: bool,
}

/// Reads one snapshot's citations file (columns `article_id`, `raw_count`,
/// `cells`). Malformed rows and duplicate articles are errors.
pub fn parse_citations(
    source_name: &str,
    snapshot_id: &str,
    data: &[u8],
) -> Result<Vec<CitationRecord>, IndicatorError> {
    let delim = tabular::sniff_delimiter(data);
    let mut rdr = tabular::reader(data, delim);
    let header = tabular::read_header(source_name, &mut rdr)?;
    let id_col = header.require(source_name, "article_id")?;
    let count_col = header.require(source_name, "raw_count")?;
    let cells_col = header.require(source_name, "cells")?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| TableError::from_csv(source_name, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let row_err = |message: String| IndicatorError::Row {
            source_name: source_name.to_owned(),
            line,
            message,
        };
        let article_id = row.get(id_col).unwrap_or("").trim().to_owned();
        if article_id.is_empty() {
            return Err(row_err("empty article_id".into()));
        }
        let raw = row.get(count_col).unwrap_or("").trim();
        let raw_count = raw
            .parse::<u64>()
            .map_err(|_| row_err(format!("raw_count `{raw}` is not a non-negative integer")))?;
        let cells = parse_cells(row.get(cells_col).unwrap_or("")).map_err(row_err)?;
        if cells.is_empty() {
            return Err(row_err(format!("article `{article_id}` has no cells")));
        }
        if !seen.insert(article_id.clone()) {
            return Err(IndicatorError::DuplicateArticle {
                source_name: source_name.to_owned(),
                line,
                article_id,
            });
        }
        out.push(CitationRecord {
            article_id,
            snapshot_id: snapshot_id.to_owned(),
            raw_count,
            cells,
        });
    }
    Ok(out)
}

pub fn load_citations(path: &Path, snapshot_id: &str) -> Result<Vec<CitationRecord>, IndicatorError> {
    let data = std::fs::read(path).map_err(|e| IndicatorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_citations(&path.display().to_string(), snapshot_id, &data)
}

pub fn write_citations<W: Write>(records: &[CitationRecord], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["article_id", "raw_count", "cells"])?;
    for r in records {
        let cells: Vec<String> = r.cells.iter().map(Cell::to_string).collect();
        w.write_record([r.article_id.as_str(), &r.raw_count.to_string(), &cells.join(";")])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell mean of `ln(1+c)`. An article in k cells counts in all k.
pub fn build_reference(snapshot_id: &str, records: &[CitationRecord]) -> FieldYearReference {
    let mut sums: BTreeMap<Cell, (f64, usize)> = BTreeMap::new();
    for r in records {
        let l = r.log_count();
        for cell in &r.cells {
            let slot = sums.entry(cell.clone()).or_insert((0.0, 0));
            slot.0 += l;
            slot.1 += 1;
        }
    }
    let means = sums.iter().map(|(c, (s, n))| (c.clone(), s / *n as f64)).collect();
    let counts = sums.into_iter().map(|(c, (_, n))| (c, n)).collect();
    FieldYearReference {
        snapshot_id: snapshot_id.to_owned(),
        means,
        counts,
    }
}

/// `l / e`, with 0/0 taken as 1 (flagged). `None` when `e = 0 < l`.
fn normalise(l: f64, e: f64) -> Option<(f64, bool)> {
    if e > 0.0 {
        Some((l / e, false))
    } else if l == 0.0 {
        Some((1.0, true))
    } else {
        None
    }
}

pub fn nlcs(record: &CitationRecord, reference: &FieldYearReference) -> Result<NlcsValue, IndicatorError> {
    if record.cells.is_empty() {
        return Err(IndicatorError::NoCells {
            article_id: record.article_id.clone(),
        });
    }
    let mut sum = 0.0;
    for cell in &record.cells {
        sum += *reference.means.get(cell).ok_or_else(|| IndicatorError::UnknownCell {
            article_id: record.article_id.clone(),
            snapshot_id: reference.snapshot_id.clone(),
            cell: cell.clone(),
        })?;
    }
    let e = sum / record.cells.len() as f64;
    let l = record.log_count();
    let (value, zero_reference) = normalise(l, e).ok_or_else(|| IndicatorError::InconsistentReference {
        article_id: record.article_id.clone(),
        l,
    })?;
    Ok(NlcsValue {
        article_id: record.article_id.clone(),
        snapshot_id: reference.snapshot_id.clone(),
        value,
        zero_reference,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCitation {
    pub snapshot_id: String,
    pub article_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NlcsBatch {
    /// Keyed by (article_id, snapshot_id).
    pub values: BTreeMap<(String, String), NlcsValue>,
    /// Corpus articles without a record in a snapshot.
    pub missing: Vec<MissingCitation>,
    /// Articles whose record could not be normalised.
    pub failures: Vec<IndicatorError>,
}

impl NlcsBatch {
    pub fn snapshot_scores(&self, snapshot_id: &str) -> ArticleScores {
        self.values
            .values()
            .filter(|v| v.snapshot_id == snapshot_id)
            .map(|v| (v.article_id.clone(), v.value))
            .collect()
    }

    pub fn snapshots(&self) -> BTreeSet<String> {
        self.values.keys().map(|(_, s)| s.clone()).collect()
    }
}

/// NLCS for every corpus article in every snapshot, each snapshot
/// normalised against its full record set.
pub fn batch_nlcs(article_ids: &[&str], snapshots: &BTreeMap<String, Vec<CitationRecord>>) -> NlcsBatch {
    let mut batch = NlcsBatch::default();
    for (snapshot_id, records) in snapshots {
        if records.is_empty() {
            log::warn!("snapshot `{snapshot_id}` has no citation records");
        }
        let reference = build_reference(snapshot_id, records);
        let by_id: BTreeMap<&str, &CitationRecord> = records.iter().map(|r| (r.article_id.as_str(), r)).collect();
        let results: Vec<Result<NlcsValue, IndicatorError>> = article_ids
            .par_iter()
            .filter_map(|id| by_id.get(id).map(|r| nlcs(r, &reference)))
            .collect();
        for id in article_ids {
            if !by_id.contains_key(id) {
                batch.missing.push(MissingCitation {
                    snapshot_id: snapshot_id.clone(),
                    article_id: (*id).to_owned(),
                });
            }
        }
        for r in results {
            match r {
                Ok(v) => {
                    batch.values.insert((v.article_id.clone(), v.snapshot_id.clone()), v);
                }
                Err(e) => {
                    log::warn!("{e}");
                    batch.failures.push(e);
                }
            }
        }
        let missing = batch.missing.iter().filter(|m| &m.snapshot_id == snapshot_id).count();
        if missing > 0 {
            log::warn!("snapshot `{snapshot_id}`: {missing} corpus articles have no citation record");
        }
    }
    batch
}

/// Columns `article_id, snapshot_id, nlcs`, ordered by article then snapshot.
pub fn write_nlcs<W: Write>(batch: &NlcsBatch, out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["article_id", "snapshot_id", "nlcs"])?;
    for v in batch.values.values() {
        w.write_record([v.article_id.as_str(), &v.snapshot_id, &fmt_f64(v.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Missing records, zero-reference conventions and failures, one per row.
pub fn write_diagnostics<W: Write>(batch: &NlcsBatch, out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["snapshot_id", "article_id", "kind", "detail"])?;
    for m in &batch.missing {
        w.write_record([m.snapshot_id.as_str(), &m.article_id, "missing", "no citation record"])?;
    }
    for v in batch.values.values().filter(|v| v.zero_reference) {
        w.write_record([
            v.snapshot_id.as_str(),
            &v.article_id,
            "zero_reference",
            "uncited article in uncited cells; value set to 1",
        ])?;
    }
    for f in &batch.failures {
        let (snapshot, article) = match f {
            IndicatorError::UnknownCell {
                article_id,
                snapshot_id,
                ..
            } => (snapshot_id.as_str(), article_id.as_str()),
            IndicatorError::InconsistentReference { article_id, .. } | IndicatorError::NoCells { article_id } => {
                ("", article_id.as_str())
            }
            _ => ("", ""),
        };
        w.write_record([snapshot, article, "error", &f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an NLCS table back into per-snapshot score maps.
pub fn read_nlcs<R: Read>(source_name: &str, input: R) -> Result<BTreeMap<String, ArticleScores>, IndicatorError> {
    let mut rdr = tabular::reader(input, b',');
    let header = tabular::read_header(source_name, &mut rdr)?;
    let id = header.require(source_name, "article_id")?;
    let snap = header.require(source_name, "snapshot_id")?;
    let val = header.require(source_name, "nlcs")?;
    let mut out: BTreeMap<String, ArticleScores> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| TableError::from_csv(source_name, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let raw = row.get(val).unwrap_or("");
        let value: f64 = raw.parse().map_err(|_| IndicatorError::Row {
            source_name: source_name.to_owned(),
            line,
            message: format!("nlcs `{raw}` is not a number"),
        })?;
        out.entry(row.get(snap).unwrap_or("").to_owned())
            .or_default()
            .insert(row.get(id).unwrap_or("").to_owned(), value);
    }
    Ok(out)
}
