//! Articles, departmental star profiles and the gold-standard proxy.
//!
//! Every article inherits the weighted mean star level of the department
//! (institution × UoA submission) that submitted it. Articles with the
//! shortest abstracts in each UoA can be dropped before scoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checksum::sha256_hex;
use crate::tabular::{self, TableError};
use crate::ArticleScores;

/// Tolerance on the sum of a published (rounded) star profile.
pub const PROFILE_SUM_TOLERANCE: f64 = 0.5;

/// Default share of shortest abstracts removed per UoA.
pub const DEFAULT_FILTER_FRACTION: f64 = 0.10;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{source_name}:{line}: duplicate article_id `{article_id}`")]
    DuplicateArticle {
        source_name: String,
        line: u64,
        article_id: String,
    },
    #[error("{source_name}:{line}: duplicate profile for ({institution_id}, UoA {uoa})")]
    DuplicateProfile {
        source_name: String,
        line: u64,
        institution_id: String,
        uoa: Uoa,
    },
    #[error("UoA {0} outside 1..=34")]
    UoaOutOfRange(i64),
    #[error("invalid star profile: {0}")]
    InvalidProfile(String),
    #[error("profile ({institution_id}, UoA {uoa}) has no weight on any included level")]
    UndefinedMean { institution_id: String, uoa: Uoa },
    #[error("filter fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("{} article(s) without a department profile, first: {}", .0.len(), .0.first().map(|u| u.to_string()).unwrap_or_default())]
    UnmatchedProfiles(Vec<UnmatchedProfile>),
}

/// Unit of Assessment number, 1..=34.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Uoa(u8);

impl Uoa {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 34;

    pub fn new(value: i64) -> Result<Self, CorpusError> {
        if (i64::from(Self::MIN)..=i64::from(Self::MAX)).contains(&value) {
            Ok(Self(value as u8))
        } else {
            Err(CorpusError::UoaOutOfRange(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Uoa> {
        (Self::MIN..=Self::MAX).map(Uoa)
    }
}

impl TryFrom<i64> for Uoa {
    type Error = CorpusError;
    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Uoa::new(value)
    }
}

impl From<Uoa> for u8 {
    fn from(uoa: Uoa) -> u8 {
        uoa.0
    }
}

impl fmt::Display for Uoa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// REF quality level 1* to 4*. Level 0 (unclassified) only exists as a
/// profile bucket and never as a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StarLevel(u8);

impl StarLevel {
    pub const ALL: [StarLevel; 4] = [StarLevel(1), StarLevel(2), StarLevel(3), StarLevel(4)];

    pub fn new(value: u8) -> Option<Self> {
        (1..=4).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub uoa: Uoa,
    pub institution_id: String,
    pub pub_year: i32,
    pub doi: Option<String>,
}

/// Published star profile of one (institution, UoA) submission.
#[derive(Debug, Clone, PartialEq)]
pub struct DepartmentProfile {
    pub institution_id: String,
    pub uoa: Uoa,
    /// Percentages for 1*, 2*, 3*, 4* in that order.
    pub star_pct: [f64; 4],
    /// Unclassified bucket, when the source publishes it.
    pub level0_pct: Option<f64>,
}

impl DepartmentProfile {
    pub fn new(
        institution_id: impl Into<String>,
        uoa: Uoa,
        star_pct: [f64; 4],
        level0_pct: Option<f64>,
    ) -> Result<Self, CorpusError> {
        let profile = Self {
            institution_id: institution_id.into(),
            uoa,
            star_pct,
            level0_pct,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let all = self.star_pct.iter().chain(self.level0_pct.iter());
        let mut sum = 0.0;
        for &p in all {
            if !p.is_finite() || p < 0.0 {
                return Err(CorpusError::InvalidProfile(format!(
                    "percentage {p} is negative or not finite"
                )));
            }
            sum += p;
        }
        if (sum - 100.0).abs() > PROFILE_SUM_TOLERANCE {
            return Err(CorpusError::InvalidProfile(format!(
                "percentages sum to {sum}, expected 100 ± {PROFILE_SUM_TOLERANCE}"
            )));
        }
        Ok(())
    }

    pub fn pct(&self, level: StarLevel) -> f64 {
        self.star_pct[usize::from(level.value() - 1)]
    }

    /// Weighted mean star level with the level-0 bucket excluded.
    pub fn mean_score(&self) -> Result<f64, CorpusError> {
        departmental_mean(self, false, 0.0)
    }

    fn key(&self) -> (&str, Uoa) {
        (&self.institution_id, self.uoa)
    }
}

/// Σ s·p_s / Σ p_s over the included levels.
///
/// With `include_level0` unset the level-0 bucket is ignored and the
/// remaining percentages are renormalised; otherwise it enters the mean
/// with value `level0_value`.
pub fn departmental_mean(
    profile: &DepartmentProfile,
    include_level0: bool,
    level0_value: f64,
) -> Result<f64, CorpusError> {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for level in StarLevel::ALL {
        let p = profile.pct(level);
        weighted += f64::from(level.value()) * p;
        total += p;
    }
    if include_level0 {
        if let Some(p) = profile.level0_pct {
            weighted += level0_value * p;
            total += p;
        }
    }
    if total <= 0.0 {
        return Err(CorpusError::UndefinedMean {
            institution_id: profile.institution_id.clone(),
            uoa: profile.uoa,
        });
    }
    Ok(weighted / total)
}

/// A data row that failed validation and was left out of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowReject {
    pub source: String,
    pub line: u64,
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<SourceFile>,
    /// Seconds since the Unix epoch at load time.
    pub loaded_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub articles: Vec<Article>,
    pub profiles: Vec<DepartmentProfile>,
    pub provenance: Provenance,
    pub rejects: Vec<RowReject>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct UnmatchedProfile {
    pub article_id: String,
    pub institution_id: String,
    pub uoa: Uoa,
}

impl fmt::Display for UnmatchedProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "article {} -> ({}, UoA {})",
            self.article_id, self.institution_id, self.uoa
        )
    }
}

impl Corpus {
    pub fn profile(&self, institution_id: &str, uoa: Uoa) -> Option<&DepartmentProfile> {
        self.profiles
            .iter()
            .find(|p| p.institution_id == institution_id && p.uoa == uoa)
    }

    pub fn article(&self, article_id: &str) -> Option<&Article> {
        self.articles.iter().find(|a| a.article_id == article_id)
    }

    pub fn uoa_of(&self) -> HashMap<&str, Uoa> {
        self.articles.iter().map(|a| (a.article_id.as_str(), a.uoa)).collect()
    }

    /// Article ids grouped by UoA, each group in corpus order.
    pub fn ids_by_uoa(&self) -> BTreeMap<Uoa, Vec<&str>> {
        let mut groups: BTreeMap<Uoa, Vec<&str>> = BTreeMap::new();
        for a in &self.articles {
            groups.entry(a.uoa).or_default().push(&a.article_id);
        }
        groups
    }

    pub fn uoas(&self) -> Vec<Uoa> {
        self.ids_by_uoa().into_keys().collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads and validates an articles file and a profiles file.
pub fn load_corpus(articles_path: &Path, profiles_path: &Path) -> Result<Corpus, CorpusError> {
    let article_bytes = read_file(articles_path)?;
    let profile_bytes = read_file(profiles_path)?;
    let articles_name = articles_path.display().to_string();
    let profiles_name = profiles_path.display().to_string();

    let (articles, mut rejects) = parse_articles(&articles_name, &article_bytes)?;
    let (profiles, profile_rejects) = parse_profiles(&profiles_name, &profile_bytes)?;
    rejects.extend(profile_rejects);

    let loaded_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(Corpus {
        articles,
        profiles,
        provenance: Provenance {
            sources: vec![
                SourceFile {
                    path: articles_name,
                    sha256: sha256_hex(&article_bytes),
                },
                SourceFile {
                    path: profiles_name,
                    sha256: sha256_hex(&profile_bytes),
                },
            ],
            loaded_at,
        },
        rejects,
    })
}

fn field(record: &csv::StringRecord, idx: usize) -> &str {
    record.get(idx).unwrap_or("")
}

/// Parses an articles table (comma- or tab-separated, with header).
///
/// Structural problems and duplicate ids are fatal; rows with bad values
/// are returned as rejects.
pub fn parse_articles(source_name: &str, data: &[u8]) -> Result<(Vec<Article>, Vec<RowReject>), CorpusError> {
    let mut rdr = tabular::reader(data, tabular::sniff_delimiter(data));
    let header = tabular::read_header(source_name, &mut rdr)?;
    let col_id = header.require(source_name, "article_id")?;
    let col_title = header.require(source_name, "title")?;
    let col_abstract = header.require(source_name, "abstract")?;
    let col_uoa = header.require(source_name, "uoa")?;
    let col_inst = header.require(source_name, "institution_id")?;
    let col_year = header.require(source_name, "pub_year")?;
    let col_doi = header.require(source_name, "doi")?;

    let mut seen = HashSet::new();
    let mut articles = Vec::new();
    let mut rejects = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| TableError::from_csv(source_name, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let article_id = field(&record, col_id).trim().to_owned();
        let mut reject = |reason: &str| {
            rejects.push(RowReject {
                source: source_name.to_owned(),
                line,
                key: article_id.clone(),
                reason: reason.to_owned(),
            })
        };
        if article_id.is_empty() {
            reject("empty article_id");
            continue;
        }
        if !seen.insert(article_id.clone()) {
            return Err(CorpusError::DuplicateArticle {
                source_name: source_name.to_owned(),
                line,
                article_id,
            });
        }
        let title = field(&record, col_title);
        if title.trim().is_empty() {
            reject("empty title");
            continue;
        }
        let uoa = match field(&record, col_uoa).trim().parse::<i64>() {
            Ok(v) => match Uoa::new(v) {
                Ok(uoa) => uoa,
                Err(_) => {
                    reject("uoa out of range");
                    continue;
                }
            },
            Err(_) => {
                reject("uoa not an integer");
                continue;
            }
        };
        let institution_id = field(&record, col_inst).trim();
        if institution_id.is_empty() {
            reject("empty institution_id");
            continue;
        }
        let pub_year = match field(&record, col_year).trim().parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                reject("pub_year not an integer");
                continue;
            }
        };
        let doi = field(&record, col_doi).trim();
        articles.push(Article {
            article_id,
            title: title.to_owned(),
            abstract_text: field(&record, col_abstract).to_owned(),
            uoa,
            institution_id: institution_id.to_owned(),
            pub_year,
            doi: (!doi.is_empty()).then(|| doi.to_owned()),
        });
    }
    Ok((articles, rejects))
}

/// Parses a profiles table: institution_id, uoa, pct_star1..pct_star4 and
/// an optional pct_star0.
pub fn parse_profiles(source_name: &str, data: &[u8]) -> Result<(Vec<DepartmentProfile>, Vec<RowReject>), CorpusError> {
    let mut rdr = tabular::reader(data, tabular::sniff_delimiter(data));
    let header = tabular::read_header(source_name, &mut rdr)?;
    let col_inst = header.require(source_name, "institution_id")?;
    let col_uoa = header.require(source_name, "uoa")?;
    let col_pct = [
        header.require(source_name, "pct_star1")?,
        header.require(source_name, "pct_star2")?,
        header.require(source_name, "pct_star3")?,
        header.require(source_name, "pct_star4")?,
    ];
    let col_pct0 = header.optional("pct_star0");

    let mut seen = HashSet::new();
    let mut profiles = Vec::new();
    let mut rejects = Vec::new();
    'rows: for result in rdr.records() {
        let record = result.map_err(|e| TableError::from_csv(source_name, &e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let institution_id = field(&record, col_inst).trim().to_owned();
        let uoa_text = field(&record, col_uoa).trim().to_owned();
        let key = format!("{institution_id}/{uoa_text}");
        let mut reject = |reason: String| {
            rejects.push(RowReject {
                source: source_name.to_owned(),
                line,
                key: key.clone(),
                reason,
            })
        };
        if institution_id.is_empty() {
            reject("empty institution_id".to_owned());
            continue;
        }
        let uoa = match uoa_text.parse::<i64>().map(Uoa::new) {
            Ok(Ok(uoa)) => uoa,
            Ok(Err(_)) => {
                reject("uoa out of range".to_owned());
                continue;
            }
            Err(_) => {
                reject("uoa not an integer".to_owned());
                continue;
            }
        };
        let mut star_pct = [0.0; 4];
        for (slot, &col) in star_pct.iter_mut().zip(&col_pct) {
            match field(&record, col).trim().parse::<f64>() {
                Ok(v) => *slot = v,
                Err(_) => {
                    reject(format!("non-numeric percentage in column {}", col + 1));
                    continue 'rows;
                }
            }
        }
        let level0_pct = match col_pct0.map(|c| field(&record, c).trim()) {
            None | Some("") => None,
            Some(text) => match text.parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    reject("non-numeric pct_star0".to_owned());
                    continue;
                }
            },
        };
        let profile = match DepartmentProfile::new(institution_id, uoa, star_pct, level0_pct) {
            Ok(p) => p,
            Err(e) => {
                reject(e.to_string());
                continue;
            }
        };
        if !seen.insert((profile.institution_id.clone(), uoa)) {
            return Err(CorpusError::DuplicateProfile {
                source_name: source_name.to_owned(),
                line,
                institution_id: profile.institution_id,
                uoa,
            });
        }
        profiles.push(profile);
    }
    Ok((profiles, rejects))
}

pub fn write_articles<W: Write>(articles: &[Article], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record([
        "article_id",
        "title",
        "abstract",
        "uoa",
        "institution_id",
        "pub_year",
        "doi",
    ])?;
    for a in articles {
        w.write_record([
            a.article_id.as_str(),
            &a.title,
            &a.abstract_text,
            &a.uoa.to_string(),
            &a.institution_id,
            &a.pub_year.to_string(),
            a.doi.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles<W: Write>(profiles: &[DepartmentProfile], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record([
        "institution_id",
        "uoa",
        "pct_star1",
        "pct_star2",
        "pct_star3",
        "pct_star4",
        "pct_star0",
    ])?;
    for p in profiles {
        let mut row = vec![p.institution_id.clone(), p.uoa.to_string()];
        row.extend(p.star_pct.iter().map(|v| tabular::fmt_f64(*v)));
        row.push(tabular::fmt_opt_f64(p.level0_pct));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejects<W: Write>(rejects: &[RowReject], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["source", "line", "key", "reason"])?;
    for r in rejects {
        w.write_record([r.source.as_str(), &r.line.to_string(), &r.key, &r.reason])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMetric {
    /// Characters of the whitespace-normalised abstract.
    #[default]
    Chars,
    Words,
}

impl std::str::FromStr for LengthMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chars" => Ok(Self::Chars),
            "words" => Ok(Self::Words),
            other => Err(format!("unknown length metric `{other}` (chars|words)")),
        }
    }
}

pub fn abstract_length(text: &str, metric: LengthMetric) -> usize {
    let words = text.split_whitespace();
    match metric {
        LengthMetric::Words => words.count(),
        LengthMetric::Chars => {
            let mut n = 0usize;
            for (i, w) in words.enumerate() {
                n += w.chars().count() + usize::from(i > 0);
            }
            n
        }
    }
}

/// Per-UoA outcome of the short-abstract filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UoaCut {
    pub n: usize,
    /// Length of the (k+1)-th shortest abstract, k = ⌊fraction·n⌋.
    pub threshold: Option<usize>,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub fraction: f64,
    pub metric: LengthMetric,
    pub cuts: BTreeMap<Uoa, UoaCut>,
    /// Removed article ids, grouped by UoA and ordered by length then id.
    pub removed: Vec<String>,
}

/// Removes the shortest `fraction` of abstracts within each UoA.
///
/// Per UoA with n articles, k = ⌊fraction·n⌋ articles go: everything
/// strictly shorter than the threshold, then ties at the threshold in
/// ascending `article_id` order until k are gone.
pub fn filter_short_abstracts(
    corpus: &Corpus,
    fraction: f64,
    metric: LengthMetric,
) -> Result<(Corpus, FilterReport), CorpusError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let mut by_uoa: BTreeMap<Uoa, Vec<(usize, &str)>> = BTreeMap::new();
    for a in &corpus.articles {
        by_uoa
            .entry(a.uoa)
            .or_default()
            .push((abstract_length(&a.abstract_text, metric), &a.article_id));
    }

    let mut removed_ids: Vec<String> = Vec::new();
    let mut cuts = BTreeMap::new();
    for (uoa, mut members) in by_uoa {
        let n = members.len();
        // Small epsilon guards products like 0.1 * 30 = 2.9999999999999996.
        let k = ((fraction * n as f64) + 1e-9).floor() as usize;
        let k = k.min(n);
        members.sort_unstable();
        let threshold = members.get(k).map(|m| m.0);
        removed_ids.extend(members[..k].iter().map(|m| m.1.to_owned()));
        cuts.insert(
            uoa,
            UoaCut {
                n,
                threshold,
                removed: k,
            },
        );
    }

    let removed: HashSet<&str> = removed_ids.iter().map(String::as_str).collect();
    let kept = Corpus {
        articles: corpus
            .articles
            .iter()
            .filter(|a| !removed.contains(a.article_id.as_str()))
            .cloned()
            .collect(),
        ..corpus.clone()
    };
    Ok((
        kept,
        FilterReport {
            fraction,
            metric,
            cuts,
            removed: removed_ids,
        },
    ))
}

/// Assigns each article its department's mean star level.
pub fn attach_gold_scores(corpus: &Corpus) -> Result<ArticleScores, CorpusError> {
    let mut means: HashMap<(&str, Uoa), f64> = HashMap::new();
    for p in &corpus.profiles {
        means.insert(p.key(), p.mean_score()?);
    }
    let mut gold = ArticleScores::new();
    let mut unmatched = Vec::new();
    for a in &corpus.articles {
        match means.get(&(a.institution_id.as_str(), a.uoa)) {
            Some(&m) => {
                gold.insert(a.article_id.clone(), m);
            }
            None => unmatched.push(UnmatchedProfile {
                article_id: a.article_id.clone(),
                institution_id: a.institution_id.clone(),
                uoa: a.uoa,
            }),
        }
    }
    if unmatched.is_empty() {
        Ok(gold)
    } else {
        Err(CorpusError::UnmatchedProfiles(unmatched))
    }
}
