//! Generator for the bundled synthetic corpus.
//!
//! Each UoA has departments with a mean quality; each article draws a
//! latent quality around its department's mean. Hidden article-level
//! expert scores are the latent quality plus rater noise, rounded to the
//! star scale, and department profiles are the rounded percentages of
//! those expert scores, so the per-UoA theoretical maximum is computable.
//! Citation counts grow with latent quality and with years since
//! publication, so older articles carry a stronger citation signal.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, TheoreticalMax, UoaKey};
use crate::corpus::{self, Article, Corpus, DepartmentProfile, Uoa};
use crate::indicators::{self, Cell, CitationRecord};
use crate::tabular::fmt_f64;
use crate::ArticleScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub uoas: Vec<u8>,
    pub articles_per_uoa: usize,
    pub departments_per_uoa: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Share of articles with a deliberately short abstract.
    pub short_abstract_rate: f64,
    /// Share of corpus articles without a record in the later snapshot.
    pub missing_later_rate: f64,
    /// Non-corpus records per corpus article in each reference set.
    pub background_ratio: f64,
    pub department_sd: f64,
    pub article_sd: f64,
    pub rater_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 2021,
            uoas: vec![3, 10, 17, 30],
            articles_per_uoa: 500,
            departments_per_uoa: 20,
            first_year: 2014,
            last_year: 2020,
            short_abstract_rate: 0.08,
            missing_later_rate: 0.02,
            background_ratio: 1.5,
            department_sd: 0.35,
            article_sd: 0.6,
            rater_sd: 0.35,
        }
    }
}

/// Snapshot labels and the year each was taken.
pub const SNAPSHOTS: [(&str, i32); 2] = [("2021", 2021), ("2024", 2024)];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub latent: ArticleScores,
    pub expert: ArticleScores,
    pub citations: BTreeMap<String, Vec<CitationRecord>>,
    pub theoretical_max: BTreeMap<UoaKey, TheoreticalMax>,
}

const WORDS: &[&str] = &[
    "analysis",
    "approach",
    "assessment",
    "behaviour",
    "boundary",
    "capacity",
    "change",
    "cohort",
    "comparative",
    "complex",
    "conditions",
    "context",
    "critical",
    "cultural",
    "data",
    "design",
    "development",
    "dynamics",
    "effects",
    "empirical",
    "evidence",
    "experimental",
    "factors",
    "framework",
    "function",
    "global",
    "growth",
    "historical",
    "impact",
    "increase",
    "individual",
    "integrated",
    "interaction",
    "interpretation",
    "knowledge",
    "large",
    "level",
    "local",
    "long",
    "mechanism",
    "method",
    "model",
    "network",
    "novel",
    "outcomes",
    "pattern",
    "performance",
    "policy",
    "population",
    "practice",
    "process",
    "properties",
    "quality",
    "rate",
    "regional",
    "relationship",
    "response",
    "risk",
    "role",
    "sample",
    "scale",
    "signal",
    "social",
    "spatial",
    "structure",
    "study",
    "survey",
    "system",
    "temporal",
    "theory",
    "transition",
    "treatment",
    "trend",
    "uncertainty",
    "variation",
    "workflow",
];

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    let s: Vec<&str> = (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    let mut out = s.join(" ");
    if let Some(first) = out.get(0..1) {
        out.replace_range(0..1, &first.to_ascii_uppercase());
    }
    out.push('.');
    out
}

fn abstract_text(rng: &mut ChaCha8Rng, target_words: usize) -> String {
    let mut parts = Vec::new();
    let mut left = target_words.max(3);
    while left > 0 {
        let n = left.min(rng.random_range(8..20)).max(3.min(left));
        parts.push(sentence(rng, n));
        left -= n;
    }
    parts.join(" ")
}

fn star(value: f64) -> f64 {
    value.round().clamp(1.0, 4.0)
}

/// Builds the whole synthetic data set from `config`.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData, corpus::CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut articles = Vec::new();
    let mut profiles = Vec::new();
    let mut latent = ArticleScores::new();
    let mut expert = ArticleScores::new();
    let years = config.first_year..=config.last_year;
    let per_dept = config.articles_per_uoa.div_ceil(config.departments_per_uoa.max(1));

    for &u in &config.uoas {
        let uoa = Uoa::new(i64::from(u))?;
        for d in 0..config.departments_per_uoa {
            let institution_id = format!("INST{:03}", d + 1);
            let dept_mean = 2.9 + config.department_sd * std_normal.sample(&mut rng);
            let mut counts = [0usize; 4];
            let start = d * per_dept;
            let end = ((d + 1) * per_dept).min(config.articles_per_uoa);
            if start >= end {
                break;
            }
            for k in start..end {
                let article_id = format!("U{u:02}-{:04}", k + 1);
                let q = dept_mean + config.article_sd * std_normal.sample(&mut rng);
                let e = star(q + config.rater_sd * std_normal.sample(&mut rng));
                counts[e as usize - 1] += 1;
                let words = if rng.random::<f64>() < config.short_abstract_rate {
                    rng.random_range(12..40)
                } else {
                    rng.random_range(120..260)
                };
                let title_words = rng.random_range(5..12);
                articles.push(Article {
                    article_id: article_id.clone(),
                    title: sentence(&mut rng, title_words).trim_end_matches('.').to_owned(),
                    abstract_text: abstract_text(&mut rng, words),
                    uoa,
                    institution_id: institution_id.clone(),
                    pub_year: rng.random_range(years.clone()),
                    doi: Some(format!("10.5555/synth.{}", article_id.to_ascii_lowercase())),
                });
                latent.insert(article_id.clone(), q);
                expert.insert(article_id, e);
            }
            let total = counts.iter().sum::<usize>().max(1) as f64;
            let pct = counts.map(|c| (c as f64 * 1000.0 / total).round() / 10.0);
            profiles.push(DepartmentProfile::new(institution_id, uoa, pct, None)?);
        }
    }
    let corpus = Corpus {
        articles,
        profiles,
        ..Corpus::default()
    };

    // Fields: three narrow fields per UoA; a fifth of articles sit in two.
    let mut cells_of: BTreeMap<String, Vec<Cell>> = BTreeMap::new();
    for a in &corpus.articles {
        let f1 = rng.random_range(0..3u8);
        let mut cells = vec![Cell {
            field_id: format!("F{:02}.{f1}", a.uoa.get()),
            year: a.pub_year,
        }];
        if rng.random::<f64>() < 0.2 {
            cells.push(Cell {
                field_id: format!("F{:02}.{}", a.uoa.get(), (f1 + 1) % 3),
                year: a.pub_year,
            });
        }
        cells_of.insert(a.article_id.clone(), cells);
    }
    let field_effect = |field: &str| -> f64 {
        let digit = field.bytes().last().map_or(0, |b| b - b'0');
        [0.0, 0.4, -0.3][digit as usize % 3]
    };
    let draw = |rng: &mut ChaCha8Rng, q: f64, cells: &[Cell], taken: i32| -> u64 {
        let age = f64::from((taken - cells[0].year).max(0)) + 0.5;
        let fe = cells.iter().map(|c| field_effect(&c.field_id)).sum::<f64>() / cells.len() as f64;
        let rate = (0.6 * (q - 2.9) + fe + 0.9 * age.ln() + 0.5 * std_normal.sample(rng)).exp();
        Poisson::new(rate.max(1e-6)).map(|p| p.sample(rng) as u64).unwrap_or(0)
    };

    let mut citations = BTreeMap::new();
    for (snapshot, taken) in SNAPSHOTS {
        let mut records = Vec::new();
        for a in &corpus.articles {
            if snapshot == "2024" && rng.random::<f64>() < config.missing_later_rate {
                continue;
            }
            let cells = &cells_of[&a.article_id];
            records.push(CitationRecord {
                article_id: a.article_id.clone(),
                snapshot_id: snapshot.to_owned(),
                raw_count: draw(&mut rng, latent[&a.article_id], cells, taken),
                cells: cells.iter().cloned().collect(),
            });
        }
        let background = (corpus.articles.len() as f64 * config.background_ratio).round() as usize;
        for b in 0..background {
            let u = config.uoas[b % config.uoas.len()];
            let cell = Cell {
                field_id: format!("F{u:02}.{}", rng.random_range(0..3u8)),
                year: rng.random_range(years.clone()),
            };
            let q = 2.7 + 0.7 * std_normal.sample(&mut rng);
            let cells = [cell];
            records.push(CitationRecord {
                article_id: format!("BG{snapshot}-{:05}", b + 1),
                snapshot_id: snapshot.to_owned(),
                raw_count: draw(&mut rng, q, &cells, taken),
                cells: cells.into_iter().collect(),
            });
        }
        citations.insert(snapshot.to_owned(), records);
    }

    let gold = corpus::attach_gold_scores(&corpus)?;
    let mut theoretical_max = BTreeMap::new();
    let table = analysis::per_uoa_correlations("expert", &expert, &gold, &corpus, None);
    for r in table.results {
        if r.rho > 0.0 {
            theoretical_max.insert(
                r.uoa,
                TheoreticalMax {
                    uoa: r.uoa,
                    rho_max: r.rho.min(1.0),
                },
            );
        }
    }

    Ok(SyntheticData {
        corpus,
        latent,
        expert,
        citations,
        theoretical_max,
    })
}

/// Writes a two-column `article_id,<column>` score file.
pub fn write_scores(path: &Path, column: &str, scores: &ArticleScores) -> std::io::Result<()> {
    let mut w = crate::tabular::writer(std::fs::File::create(path)?);
    w.write_record(["article_id", column])?;
    for (id, v) in scores {
        w.write_record([id.as_str(), &fmt_f64(*v)])?;
    }
    w.flush()
}

/// Reads a two-column `article_id,<column>` score file.
pub fn read_scores(path: &Path, column: &str) -> Result<ArticleScores, crate::tabular::TableError> {
    let name = path.display().to_string();
    let data = std::fs::read(path).map_err(|e| crate::tabular::TableError::new(&name, None, e.to_string()))?;
    let mut rdr = crate::tabular::reader(data.as_slice(), b',');
    let header = crate::tabular::read_header(&name, &mut rdr)?;
    let id = header.require(&name, "article_id")?;
    let col = header.require(&name, column)?;
    let mut out = ArticleScores::new();
    for row in rdr.records() {
        let row = row.map_err(|e| crate::tabular::TableError::from_csv(&name, &e))?;
        let line = row.position().map(|p| p.line());
        let raw = row.get(col).unwrap_or("");
        let v: f64 = raw
            .parse()
            .map_err(|_| crate::tabular::TableError::new(&name, line, format!("`{raw}` is not a number")))?;
        out.insert(row.get(id).unwrap_or("").to_owned(), v);
    }
    Ok(out)
}

/// File names written by [`write_dir`].
pub mod files {
    pub const ARTICLES: &str = "articles.csv";
    pub const PROFILES: &str = "profiles.csv";
    pub const LATENT: &str = "latent.csv";
    pub const EXPERT: &str = "expert_scores.csv";
    pub const THEORETICAL_MAX: &str = "theoretical_max.csv";

    pub fn citations(snapshot: &str) -> String {
        format!("citations_{snapshot}.csv")
    }
}

pub fn write_dir(data: &SyntheticData, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| std::fs::File::create(dir.join(name));
    corpus::write_articles(&data.corpus.articles, create(files::ARTICLES)?)?;
    corpus::write_profiles(&data.corpus.profiles, create(files::PROFILES)?)?;
    write_scores(&dir.join(files::LATENT), "latent", &data.latent)?;
    write_scores(&dir.join(files::EXPERT), "expert", &data.expert)?;
    for (snapshot, records) in &data.citations {
        indicators::write_citations(records, create(&files::citations(snapshot))?)?;
    }
    analysis::write_theoretical_max(&data.theoretical_max, create(files::THEORETICAL_MAX)?)?;
    Ok(())
}
