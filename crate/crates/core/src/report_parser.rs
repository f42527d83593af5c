//! Star-score extraction from narrative evaluation reports.
//!
//! # Grammar
//!
//! A score is a *label* followed, on the same line, by optional connector
//! text and a *value*:
//!
//! - overall labels: `Overall`, `Overall score|rating|grade|assessment|
//!   evaluation`, `Overall quality score`, `Final score|rating|grade|
//!   assessment`, and a bare `Score`/`Rating` at the start of a line;
//! - dimension labels: `Originality`, `Significance`, `Rigour`/`Rigor`,
//!   each optionally followed by `score` or `rating`;
//! - connectors: spaces, `: = - – — ( [ | * _ #`, and the words `is`/`of`;
//!   a single line break is allowed only when the value carries a star
//!   marker;
//! - values: a decimal number, or `one`..`four`, optionally followed by a
//!   star marker (`*`, `star`, `stars`, `-star`, `/4`, `out of 4`).
//!
//! A value without a star marker counts only when it lies in [1, 4] and
//! either the connector contains punctuation or the label names a
//! score/rating; spelled-out numbers always need the marker. Marked values
//! outside [1, 4] are clamped. Labels are matched case-insensitively and
//! the last occurrence of each label wins.
//!
//! Precedence: a stated overall score, otherwise the mean of all three
//! dimension scores, otherwise the report is unresolved and goes to the
//! manual queue.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{RawReport, RunKey};
use crate::tabular::{self, fmt_f64, fmt_opt_f64, TableError};
use crate::{snap_score, ArticleScores};

pub const MIN_STAR: f64 = 1.0;
pub const MAX_STAR: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum ParserError {
    #[error("no article is scored by both models")]
    DisjointModels,
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{source_name}:{line}: {message}")]
    Row {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreMethod {
    OverallStated,
    DimensionMean,
    Manual,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::OverallStated => "overall_stated",
            ScoreMethod::DimensionMean => "dimension_mean",
            ScoreMethod::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "overall_stated" => Some(Self::OverallStated),
            "dimension_mean" => Some(Self::DimensionMean),
            "manual" => Some(Self::Manual),
            _ => None,
        }
    }
}

/// Originality, significance, rigour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    pub originality: f64,
    pub significance: f64,
    pub rigour: f64,
}

impl Dimensions {
    pub fn mean(&self) -> f64 {
        (self.originality + self.significance + self.rigour) / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedScore {
    pub key: RunKey,
    pub overall: Option<f64>,
    pub dims: Option<Dimensions>,
    pub resolved: f64,
    pub method: ScoreMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedItem {
    pub key: RunKey,
    pub report_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    Parsed(ParsedScore),
    Unresolved(UnresolvedItem),
}

/// Raw label hits before precedence is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Extraction {
    pub overall: Option<f64>,
    pub originality: Option<f64>,
    pub significance: Option<f64>,
    pub rigour: Option<f64>,
}

impl Extraction {
    pub fn dims(&self) -> Option<Dimensions> {
        Some(Dimensions {
            originality: self.originality?,
            significance: self.significance?,
            rigour: self.rigour?,
        })
    }

    /// Resolved value and method under the precedence rule.
    pub fn resolve(&self) -> Option<(f64, ScoreMethod)> {
        if let Some(o) = self.overall {
            return Some((o, ScoreMethod::OverallStated));
        }
        self.dims().map(|d| (d.mean(), ScoreMethod::DimensionMean))
    }
}

static SCORE_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?imx)
        (?:
            \b(?P<label>
                overall (?: [\ \t]+ (?: quality [\ \t]+ )? (?: score | rating | grade | assessment | evaluation ) )?
              | final [\ \t]+ (?: score | rating | grade | assessment )
              | originality (?: [\ \t]+ (?: score | rating ) )?
              | significance (?: [\ \t]+ (?: score | rating ) )?
              | rigou?r (?: [\ \t]+ (?: score | rating ) )?
            )\b
          | ^ [\ \t>*\#_\-]* (?P<bare>score | rating)\b
        )
        (?P<sep> (?: [\ \t:=\-–—(\[|*_\#] | \bis\b | \bof\b )* )
        (?P<nl> \r?\n [\ \t>*_\#\-]* )?
        (?P<num> [0-9]+ (?: \.[0-9]+ )? | one | two | three | four )
        (?P<suffix> [\ \t]* (?: \* | -?[\ \t]*stars?\b | /[\ \t]*4\b | out[\ \t]+of[\ \t]+4\b ) )?
        ",
    )
    .expect("score pattern compiles")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Overall,
    Originality,
    Significance,
    Rigour,
}

fn slot_for(label: &str) -> Slot {
    let l = label.to_ascii_lowercase();
    if l.starts_with("originality") {
        Slot::Originality
    } else if l.starts_with("significance") {
        Slot::Significance
    } else if l.starts_with("rigo") {
        Slot::Rigour
    } else {
        Slot::Overall
    }
}

fn word_value(word: &str) -> Option<f64> {
    match word.to_ascii_lowercase().as_str() {
        "one" => Some(1.0),
        "two" => Some(2.0),
        "three" => Some(3.0),
        "four" => Some(4.0),
        _ => None,
    }
}

/// Applies the label grammar to report text.
pub fn extract_scores(text: &str) -> Extraction {
    let mut out = Extraction::default();
    for caps in SCORE_PATTERN.captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        let num = &caps["num"];
        let suffix = caps.name("suffix").is_some();
        // The value must end at a token boundary ("3rd", "3.5.1" are not scores).
        let rest = &text[whole.end()..];
        if let Some(next) = rest.chars().next() {
            if next.is_alphanumeric() || (next == '.' && rest[1..].starts_with(|c: char| c.is_ascii_digit())) {
                continue;
            }
        }
        let (slot, label_scored) = match (caps.name("label"), caps.name("bare")) {
            (Some(l), _) => {
                let text = l.as_str().to_ascii_lowercase();
                let scored = ["score", "rating", "grade", "assessment", "evaluation"]
                    .iter()
                    .any(|w| text.contains(w));
                (slot_for(&text), scored)
            }
            (None, Some(_)) => (Slot::Overall, true),
            (None, None) => continue,
        };
        if caps.name("nl").is_some() && !suffix {
            continue;
        }
        let value = match num.parse::<f64>() {
            Ok(v) => v,
            Err(_) => match word_value(num) {
                Some(v) if suffix => v,
                _ => continue,
            },
        };
        if !value.is_finite() {
            continue;
        }
        let value = if suffix {
            value.clamp(MIN_STAR, MAX_STAR)
        } else {
            let sep = &caps["sep"];
            let punctuated = sep.contains([':', '=', '-', '–', '—', '(', '[', '|']);
            if !(MIN_STAR..=MAX_STAR).contains(&value) || !(punctuated || label_scored) {
                continue;
            }
            value
        };
        match slot {
            Slot::Overall => out.overall = Some(value),
            Slot::Originality => out.originality = Some(value),
            Slot::Significance => out.significance = Some(value),
            Slot::Rigour => out.rigour = Some(value),
        }
    }
    out
}

pub fn parse_report(report: &RawReport) -> ParseOutcome {
    let extraction = extract_scores(&report.report_text);
    match extraction.resolve() {
        Some((resolved, method)) => ParseOutcome::Parsed(ParsedScore {
            key: report.key.clone(),
            overall: extraction.overall,
            dims: extraction.dims(),
            resolved,
            method,
        }),
        None => ParseOutcome::Unresolved(UnresolvedItem {
            key: report.key.clone(),
            report_text: report.report_text.clone(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub key: RunKey,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManualDecision {
    Scored(ParsedScore),
    NoScore(Exclusion),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResolveError {
    #[error("{0} is outside [1, 4]; enter a score between 1 and 4 or `no score`")]
    OutOfRange(f64),
    #[error("cannot read `{0}`; enter a score between 1 and 4 or `no score`")]
    Unrecognised(String),
}

pub const NO_SCORE: &str = "no score";

/// Interprets one human answer for an unresolved report.
///
/// An error means the answer should be asked for again.
pub fn resolve_manually(item: &UnresolvedItem, input: &str) -> Result<ManualDecision, ResolveError> {
    let answer = input.trim().to_ascii_lowercase();
    if matches!(answer.as_str(), "no score" | "noscore" | "none" | "n") {
        return Ok(ManualDecision::NoScore(Exclusion {
            key: item.key.clone(),
            reason: "no score given (manual review)".to_owned(),
        }));
    }
    let value: f64 = answer
        .trim_end_matches('*')
        .trim()
        .parse()
        .map_err(|_| ResolveError::Unrecognised(input.trim().to_owned()))?;
    if !(MIN_STAR..=MAX_STAR).contains(&value) {
        return Err(ResolveError::OutOfRange(value));
    }
    Ok(ManualDecision::Scored(ParsedScore {
        key: item.key.clone(),
        overall: None,
        dims: None,
        resolved: value,
        method: ScoreMethod::Manual,
    }))
}

/// Persisted manual answer: a score, or `None` for "no score".
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub key: RunKey,
    pub score: Option<f64>,
}

impl Resolution {
    pub fn from_decision(decision: &ManualDecision) -> Self {
        match decision {
            ManualDecision::Scored(s) => Self {
                key: s.key.clone(),
                score: Some(s.resolved),
            },
            ManualDecision::NoScore(e) => Self {
                key: e.key.clone(),
                score: None,
            },
        }
    }

    pub fn to_decision(&self) -> ManualDecision {
        let item = UnresolvedItem {
            key: self.key.clone(),
            report_text: String::new(),
        };
        let answer = self.score.map_or_else(|| NO_SCORE.to_owned(), fmt_f64);
        resolve_manually(&item, &answer).expect("stored resolutions are valid")
    }
}

/// Scores, exclusions and the still-open queue after applying stored
/// manual answers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedBatch {
    pub scores: Vec<ParsedScore>,
    pub exclusions: Vec<Exclusion>,
    pub unresolved: Vec<UnresolvedItem>,
}

/// Parses every report, then settles unresolved ones from `resolutions`.
pub fn parse_batch(reports: &[RawReport], resolutions: &[Resolution]) -> ParsedBatch {
    let answers: BTreeMap<&RunKey, &Resolution> = resolutions.iter().map(|r| (&r.key, r)).collect();
    let mut batch = ParsedBatch::default();
    for report in reports {
        match parse_report(report) {
            ParseOutcome::Parsed(score) => batch.scores.push(score),
            ParseOutcome::Unresolved(item) => match answers.get(&item.key) {
                Some(r) => match r.to_decision() {
                    ManualDecision::Scored(s) => batch.scores.push(s),
                    ManualDecision::NoScore(e) => batch.exclusions.push(e),
                },
                None => batch.unresolved.push(item),
            },
        }
    }
    batch
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMean {
    pub mean: f64,
    pub runs: usize,
    /// Fewer runs than the campaign's nominal count.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRunMeans {
    pub model_id: String,
    pub nominal_runs: usize,
    pub means: BTreeMap<String, RunMean>,
    /// `(article_id, reason)` for expected articles without any usable run.
    pub excluded: Vec<(String, String)>,
}

impl ModelRunMeans {
    pub fn scores(&self) -> ArticleScores {
        self.means.iter().map(|(k, v)| (k.clone(), v.mean)).collect()
    }
}

/// Mean of the resolved scores, independent of input order.
pub fn mean_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    snap_score(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per (model, article) mean of resolved run scores.
///
/// Articles listed in `expected` that have no score for a model are
/// reported in that model's `excluded` list.
pub fn average_runs(
    scores: &[ParsedScore],
    nominal_runs: usize,
    expected: &[String],
) -> BTreeMap<String, ModelRunMeans> {
    let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for s in scores {
        grouped
            .entry(&s.key.model_id)
            .or_default()
            .entry(&s.key.article_id)
            .or_default()
            .push(s.resolved);
    }
    grouped
        .into_iter()
        .map(|(model, articles)| {
            let excluded = expected
                .iter()
                .filter(|id| !articles.contains_key(id.as_str()))
                .map(|id| (id.clone(), "no valid run".to_owned()))
                .collect();
            let means = articles
                .into_iter()
                .map(|(id, mut values)| {
                    let runs = values.len();
                    let run_mean = RunMean {
                        mean: mean_of(&mut values),
                        runs,
                        short: runs < nominal_runs,
                    };
                    (id.to_owned(), run_mean)
                })
                .collect();
            (
                model.to_owned(),
                ModelRunMeans {
                    model_id: model.to_owned(),
                    nominal_runs,
                    means,
                    excluded,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub scores: ArticleScores,
    /// Articles present in only one of the inputs.
    pub dropped: Vec<String>,
}

/// Per-article mean of two models' run means over the shared articles.
pub fn combine_models(a: &ArticleScores, b: &ArticleScores) -> Result<Combined, ParserError> {
    let mut scores = ArticleScores::new();
    for (id, &va) in a {
        if let Some(&vb) = b.get(id) {
            scores.insert(id.clone(), snap_score((va + vb) / 2.0));
        }
    }
    if scores.is_empty() {
        return Err(ParserError::DisjointModels);
    }
    let dropped: BTreeSet<String> = a
        .keys()
        .chain(b.keys())
        .filter(|id| !scores.contains_key(*id))
        .cloned()
        .collect();
    if !dropped.is_empty() {
        log::warn!(
            "combine_models: {} article(s) scored by only one model were dropped",
            dropped.len()
        );
    }
    Ok(Combined {
        scores,
        dropped: dropped.into_iter().collect(),
    })
}

pub const SCORE_STORE_COLUMNS: [&str; 9] = [
    "article_id",
    "model_id",
    "run_index",
    "overall",
    "orig",
    "sig",
    "rig",
    "resolved",
    "method",
];

pub fn write_score_store<W: Write>(scores: &[ParsedScore], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(SCORE_STORE_COLUMNS)?;
    for s in scores {
        let d = s.dims;
        w.write_record([
            s.key.article_id.as_str(),
            &s.key.model_id,
            &s.key.run_index.to_string(),
            &fmt_opt_f64(s.overall),
            &fmt_opt_f64(d.map(|d| d.originality)),
            &fmt_opt_f64(d.map(|d| d.significance)),
            &fmt_opt_f64(d.map(|d| d.rigour)),
            &fmt_f64(s.resolved),
            s.method.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn row_err(source_name: &str, record: &csv::StringRecord, message: impl Into<String>) -> ParserError {
    ParserError::Row {
        source_name: source_name.to_owned(),
        line: record.position().map_or(0, |p| p.line()),
        message: message.into(),
    }
}

fn parse_opt(source_name: &str, record: &csv::StringRecord, idx: usize) -> Result<Option<f64>, ParserError> {
    let text = record.get(idx).unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    text.parse()
        .map(Some)
        .map_err(|_| row_err(source_name, record, format!("not a number: `{text}`")))
}

fn parse_key(source_name: &str, record: &csv::StringRecord, cols: [usize; 3]) -> Result<RunKey, ParserError> {
    let run_index = record
        .get(cols[2])
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| row_err(source_name, record, "run_index is not a positive integer"))?;
    Ok(RunKey {
        article_id: record.get(cols[0]).unwrap_or("").to_owned(),
        model_id: record.get(cols[1]).unwrap_or("").to_owned(),
        run_index,
    })
}

fn key_columns(source_name: &str, header: &tabular::Header) -> Result<[usize; 3], TableError> {
    Ok([
        header.require(source_name, "article_id")?,
        header.require(source_name, "model_id")?,
        header.require(source_name, "run_index")?,
    ])
}

pub fn read_score_store<R: Read>(source_name: &str, input: R) -> Result<Vec<ParsedScore>, ParserError> {
    let mut rdr = tabular::reader(input, b',');
    let header = tabular::read_header(source_name, &mut rdr)?;
    let keys = key_columns(source_name, &header)?;
    let cols: Vec<usize> = SCORE_STORE_COLUMNS[3..]
        .iter()
        .map(|c| header.require(source_name, c))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TableError::from_csv(source_name, &e))?;
        let key = parse_key(source_name, &record, keys)?;
        let overall = parse_opt(source_name, &record, cols[0])?;
        let o = parse_opt(source_name, &record, cols[1])?;
        let s = parse_opt(source_name, &record, cols[2])?;
        let r = parse_opt(source_name, &record, cols[3])?;
        let resolved = parse_opt(source_name, &record, cols[4])?
            .ok_or_else(|| row_err(source_name, &record, "missing resolved score"))?;
        let method_text = record.get(cols[5]).unwrap_or("");
        let method = ScoreMethod::parse(method_text)
            .ok_or_else(|| row_err(source_name, &record, format!("unknown method `{method_text}`")))?;
        let dims = match (o, s, r) {
            (Some(originality), Some(significance), Some(rigour)) => Some(Dimensions {
                originality,
                significance,
                rigour,
            }),
            _ => None,
        };
        out.push(ParsedScore {
            key,
            overall,
            dims,
            resolved,
            method,
        });
    }
    Ok(out)
}

pub fn write_unresolved<W: Write>(items: &[UnresolvedItem], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["article_id", "model_id", "run_index", "report_text"])?;
    for item in items {
        w.write_record([
            item.key.article_id.as_str(),
            &item.key.model_id,
            &item.key.run_index.to_string(),
            &item.report_text,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_unresolved<R: Read>(source_name: &str, input: R) -> Result<Vec<UnresolvedItem>, ParserError> {
    let mut rdr = tabular::reader(input, b',');
    let header = tabular::read_header(source_name, &mut rdr)?;
    let keys = key_columns(source_name, &header)?;
    let text_col = header.require(source_name, "report_text")?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TableError::from_csv(source_name, &e))?;
        out.push(UnresolvedItem {
            key: parse_key(source_name, &record, keys)?,
            report_text: record.get(text_col).unwrap_or("").to_owned(),
        });
    }
    Ok(out)
}

pub fn write_resolutions<W: Write>(items: &[Resolution], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["article_id", "model_id", "run_index", "score"])?;
    for r in items {
        w.write_record([
            r.key.article_id.as_str(),
            &r.key.model_id,
            &r.key.run_index.to_string(),
            &r.score.map_or_else(|| NO_SCORE.to_owned(), fmt_f64),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_resolutions<R: Read>(source_name: &str, input: R) -> Result<Vec<Resolution>, ParserError> {
    let mut rdr = tabular::reader(input, b',');
    let header = tabular::read_header(source_name, &mut rdr)?;
    let keys = key_columns(source_name, &header)?;
    let score_col = header.require(source_name, "score")?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TableError::from_csv(source_name, &e))?;
        let key = parse_key(source_name, &record, keys)?;
        let item = UnresolvedItem {
            key,
            report_text: String::new(),
        };
        let decision = resolve_manually(&item, record.get(score_col).unwrap_or(""))
            .map_err(|e| row_err(source_name, &record, e.to_string()))?;
        out.push(Resolution::from_decision(&decision));
    }
    Ok(out)
}

pub fn write_exclusions<W: Write>(items: &[Exclusion], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["article_id", "model_id", "run_index", "reason"])?;
    for e in items {
        w.write_record([
            e.key.article_id.as_str(),
            &e.key.model_id,
            &e.key.run_index.to_string(),
            &e.reason,
        ])?;
    }
    w.flush()?;
    Ok(())
}
