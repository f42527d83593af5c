//! Research-quality indicator toolkit.
//!
//! The crate scores journal articles with a pluggable LLM backend, extracts
//! star scores from the returned narrative reports, computes field/year
//! normalised log citation scores (NLCS), and compares both indicator
//! families against departmental-average gold scores with Spearman
//! correlation and percentile bootstrap intervals.
//!
//! Pipeline stages, bottom-up:
//!
//! - [`corpus`]: articles, department star profiles, short-abstract filter,
//!   gold scores.
//! - [`prompts`]: the four panel-group system prompts and the per-article
//!   user prompt.
//! - [`gateway`]: run scheduling, submission with retries and an
//!   append-only cache, and a deterministic mock backend.
//! - [`report_parser`]: star-score extraction, manual resolution, run
//!   averaging and model combination.
//! - [`indicators`]: NLCS against a field/year reference set.
//! - [`analysis`]: Spearman, bootstrap intervals, per-UoA tables, year
//!   trends and mean summaries.
//! - [`costmodel`]: correlation versus query cost over all run mixes of two
//!   models.
//! - [`synthetic`]: generator for the bundled synthetic corpus.

pub mod analysis;
pub mod checksum;
pub mod corpus;
pub mod costmodel;
pub mod gateway;
pub mod indicators;
pub mod prompts;
pub mod report_parser;
pub mod synthetic;
pub mod tabular;

/// Article-level indicator values keyed by `article_id`.
pub type ArticleScores = std::collections::BTreeMap<String, f64>;

/// Snaps an averaged score to a 1e-9 grid.
///
/// Averages of star scores are ratios with small denominators, so two
/// mathematically equal averages reached through different summation orders
/// land on the same grid point and rank as exact ties.
pub fn snap_score(value: f64) -> f64 {
    (value * 1e9).round() / 1e9
}
