//! Correlation attainable from every mix of runs of two models, against
//! the mix's query cost.
//!
//! For `i` runs of model A and `j` of model B, every size-`i` subset of A's
//! run indices is paired with every size-`j` subset of B's. Each article's
//! value is the mean of the selected runs (both models pooled); the subset's
//! statistic is the article-weighted mean of per-UoA Spearman correlations
//! against gold. Averaging is symmetric in run order, so subsets cover all
//! orderings without repetition.
//!
//! Articles are those with gold and at least one run from each model. A
//! selected run that an article lacks is replaced by that article's mean
//! over its available runs for the same model; points that needed this are
//! flagged.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisError};
use crate::corpus::{Corpus, Uoa};
use crate::report_parser::ParsedScore;
use crate::tabular::{self, fmt_f64};
use crate::{snap_score, ArticleScores};

pub const DEFAULT_MAX_RUNS: u32 = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("{runs} runs per model would need {subsets} subset evaluations; the limit is {max} runs")]
    TooManyRuns { runs: u32, max: u32, subsets: u128 },
    #[error("nominal run count must be at least 1")]
    NoRuns,
    #[error("unit costs must be positive, got ({0}, {1})")]
    InvalidCost(f64, f64),
    #[error("no article has gold scores and runs from both models")]
    NoArticles,
    #[error("runs A={runs_a:#b} B={runs_b:#b}: {source}")]
    Subset {
        runs_a: u32,
        runs_b: u32,
        #[source]
        source: AnalysisError,
    },
}

/// Per article, the resolved score of each run index.
pub type RunScores = BTreeMap<String, BTreeMap<u32, f64>>;

/// Collects one model's parsed scores by article and run.
pub fn run_scores(scores: &[ParsedScore], model_id: &str) -> RunScores {
    let mut out = RunScores::new();
    for s in scores.iter().filter(|s| s.key.model_id == model_id) {
        out.entry(s.key.article_id.clone())
            .or_default()
            .insert(s.key.run_index, s.resolved);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    /// Nominal runs per article and model.
    pub runs: u32,
    pub cost_a: f64,
    pub cost_b: f64,
    pub max_runs: u32,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            cost_a: 10.0,
            cost_b: 1.0,
            max_runs: DEFAULT_MAX_RUNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboPoint {
    pub runs_a: u32,
    pub runs_b: u32,
    pub unit_cost: f64,
    pub subset_count: u64,
    pub mean_rho: f64,
    /// Some subset substituted an article's available-run mean for a
    /// missing run.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    /// Ordered by (runs_a, runs_b).
    pub points: Vec<ComboPoint>,
    /// Articles with fewer than the nominal runs for a model.
    pub short_articles: Vec<String>,
    /// Gold-scored articles left out because a model has no run for them.
    pub dropped_articles: Vec<String>,
}

/// Sum by recursive halving; the result depends only on the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let (l, r) = values.split_at(values.len() / 2);
    pairwise_sum(l) + pairwise_sum(r)
}

pub fn binomial(n: u32, k: u32) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * u64::from(n - i) / u64::from(i + 1))
}

struct Article {
    uoa: Uoa,
    gold: f64,
    /// Run values for indices 1..=N; missing runs hold the fallback mean.
    a: Vec<f64>,
    b: Vec<f64>,
    /// Bitmask of indices filled by fallback.
    missing_a: u32,
    missing_b: u32,
}

fn fill(runs: &BTreeMap<u32, f64>, n: u32) -> (Vec<f64>, u32) {
    let mut available: Vec<f64> = (1..=n).filter_map(|r| runs.get(&r).copied()).collect();
    let fallback = crate::report_parser::mean_of(&mut available);
    let mut missing = 0u32;
    let values = (1..=n)
        .map(|r| match runs.get(&r) {
            Some(&v) => v,
            None => {
                missing |= 1 << (r - 1);
                fallback
            }
        })
        .collect();
    (values, missing)
}

/// Every nonempty mix of run subsets, with its cost and mean statistic.
pub fn cost_curve(
    scores_a: &RunScores,
    scores_b: &RunScores,
    gold: &ArticleScores,
    corpus: &Corpus,
    config: &CostConfig,
) -> Result<CostCurve, CostError> {
    let n = config.runs;
    if n == 0 {
        return Err(CostError::NoRuns);
    }
    if n > config.max_runs {
        return Err(CostError::TooManyRuns {
            runs: n,
            max: config.max_runs,
            subsets: (1u128 << (2 * n)) - 1,
        });
    }
    if !(config.cost_a > 0.0 && config.cost_b > 0.0) {
        return Err(CostError::InvalidCost(config.cost_a, config.cost_b));
    }

    let in_range = |runs: &BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
        runs.iter()
            .filter(|(r, _)| (1..=n).contains(*r))
            .map(|(r, v)| (*r, *v))
            .collect()
    };
    let mut articles = Vec::new();
    let mut short = Vec::new();
    let mut dropped = Vec::new();
    for a in &corpus.articles {
        let Some(&g) = gold.get(&a.article_id) else { continue };
        let ra = scores_a.get(&a.article_id).map(in_range).unwrap_or_default();
        let rb = scores_b.get(&a.article_id).map(in_range).unwrap_or_default();
        if ra.is_empty() || rb.is_empty() {
            dropped.push(a.article_id.clone());
            continue;
        }
        let (va, ma) = fill(&ra, n);
        let (vb, mb) = fill(&rb, n);
        if ma != 0 || mb != 0 {
            short.push(a.article_id.clone());
        }
        articles.push(Article {
            uoa: a.uoa,
            gold: g,
            a: va,
            b: vb,
            missing_a: ma,
            missing_b: mb,
        });
    }
    if articles.is_empty() {
        return Err(CostError::NoArticles);
    }
    if !dropped.is_empty() {
        log::warn!(
            "cost curve: {} article(s) lack runs from one model and are left out",
            dropped.len()
        );
    }

    let masks: Vec<(u32, u32)> = (0..1u32 << n)
        .flat_map(|ma| (0..1u32 << n).map(move |mb| (ma, mb)))
        .filter(|&(ma, mb)| ma != 0 || mb != 0)
        .collect();
    let evaluated: Vec<Result<(f64, bool), CostError>> =
        masks.par_iter().map(|&(ma, mb)| evaluate(&articles, ma, mb)).collect();

    let mut groups: BTreeMap<(u32, u32), (Vec<f64>, bool)> = BTreeMap::new();
    for (&(ma, mb), result) in masks.iter().zip(evaluated) {
        let (rho, fallback) = result?;
        let slot = groups.entry((ma.count_ones(), mb.count_ones())).or_default();
        slot.0.push(rho);
        slot.1 |= fallback;
    }
    let points = groups
        .into_iter()
        .map(|((i, j), (rhos, fallback))| ComboPoint {
            runs_a: i,
            runs_b: j,
            unit_cost: f64::from(i) * config.cost_a + f64::from(j) * config.cost_b,
            subset_count: rhos.len() as u64,
            mean_rho: pairwise_sum(&rhos) / rhos.len() as f64,
            fallback,
        })
        .collect();
    Ok(CostCurve {
        points,
        short_articles: short,
        dropped_articles: dropped,
    })
}

fn evaluate(articles: &[Article], mask_a: u32, mask_b: u32) -> Result<(f64, bool), CostError> {
    let mut slices: BTreeMap<Uoa, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut fallback = false;
    let mut picked = Vec::with_capacity(32);
    for art in articles {
        picked.clear();
        for (k, v) in art.a.iter().enumerate() {
            if mask_a & (1 << k) != 0 {
                picked.push(*v);
            }
        }
        for (k, v) in art.b.iter().enumerate() {
            if mask_b & (1 << k) != 0 {
                picked.push(*v);
            }
        }
        fallback |= art.missing_a & mask_a != 0 || art.missing_b & mask_b != 0;
        let value = {
            picked.sort_by(f64::total_cmp);
            snap_score(picked.iter().sum::<f64>() / picked.len() as f64)
        };
        let slot = slices.entry(art.uoa).or_default();
        slot.0.push(value);
        slot.1.push(art.gold);
    }
    let rho = analysis::weighted_grouped_correlation(&slices).map_err(|source| CostError::Subset {
        runs_a: mask_a,
        runs_b: mask_b,
        source,
    })?;
    Ok((rho, fallback))
}

/// Points not dominated in (lower cost, higher mean_rho), by cost.
pub fn pareto_front(points: &[ComboPoint]) -> Vec<ComboPoint> {
    let dominated = |p: &ComboPoint| {
        points.iter().any(|q| {
            q.unit_cost <= p.unit_cost
                && q.mean_rho >= p.mean_rho
                && (q.unit_cost < p.unit_cost || q.mean_rho > p.mean_rho)
        })
    };
    let mut front: Vec<ComboPoint> = points.iter().filter(|p| !dominated(p)).cloned().collect();
    front.sort_by(|a, b| {
        a.unit_cost
            .total_cmp(&b.unit_cost)
            .then(b.mean_rho.total_cmp(&a.mean_rho))
    });
    front
}

/// Columns `runs_a, runs_b, unit_cost, subset_count, mean_rho,
/// pareto_flag, fallback`.
pub fn write_cost_curve<W: Write>(curve: &CostCurve, out: W) -> csv::Result<()> {
    let front = pareto_front(&curve.points);
    let on_front = |p: &ComboPoint| front.iter().any(|f| f.runs_a == p.runs_a && f.runs_b == p.runs_b);
    let mut w = tabular::writer(out);
    w.write_record([
        "runs_a",
        "runs_b",
        "unit_cost",
        "subset_count",
        "mean_rho",
        "pareto_flag",
        "fallback",
    ])?;
    for p in &curve.points {
        w.write_record([
            p.runs_a.to_string(),
            p.runs_b.to_string(),
            fmt_f64(p.unit_cost),
            p.subset_count.to_string(),
            fmt_f64(p.mean_rho),
            on_front(p).to_string(),
            p.fallback.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Article as CorpusArticle;
    use crate::report_parser::combine_models;

    fn corpus(n_per_uoa: usize) -> Corpus {
        let mut articles = Vec::new();
        for uoa in [3i64, 17] {
            for k in 0..n_per_uoa {
                articles.push(CorpusArticle {
                    article_id: format!("u{uoa}-{k}"),
                    title: "t".into(),
                    abstract_text: "a".into(),
                    uoa: Uoa::new(uoa).unwrap(),
                    institution_id: format!("i{}", k % 4),
                    pub_year: 2018,
                    doi: None,
                });
            }
        }
        Corpus {
            articles,
            ..Corpus::default()
        }
    }

    /// Deterministic pseudo-noise in [-1, 1].
    fn jitter(a: usize, b: u32, salt: u32) -> f64 {
        let h = (a as u64 * 2_654_435_761 + u64::from(b) * 40_503 + u64::from(salt) * 97) % 1000;
        h as f64 / 500.0 - 1.0
    }

    fn fixture(n: u32) -> (Corpus, ArticleScores, RunScores, RunScores) {
        let c = corpus(12);
        let mut gold = ArticleScores::new();
        let (mut a, mut b) = (RunScores::new(), RunScores::new());
        for (k, art) in c.articles.iter().enumerate() {
            let g = 1.0 + (k % 4) as f64 * 0.75;
            gold.insert(art.article_id.clone(), g);
            let runs = |salt, sd: f64| -> BTreeMap<u32, f64> {
                (1..=n)
                    .map(|r| (r, ((g + sd * jitter(k, r, salt)) * 2.0).round().clamp(2.0, 8.0) / 2.0))
                    .collect()
            };
            a.insert(art.article_id.clone(), runs(1, 0.8));
            b.insert(art.article_id.clone(), runs(2, 1.5));
        }
        (c, gold, a, b)
    }

    #[test]
    fn subset_counts_and_costs() {
        let (c, gold, a, b) = fixture(5);
        let curve = cost_curve(&a, &b, &gold, &c, &CostConfig::default()).unwrap();
        assert_eq!(curve.points.len(), 35);
        let total: u64 = curve.points.iter().map(|p| p.subset_count).sum();
        assert_eq!(total, 1023);
        for p in &curve.points {
            assert_eq!(p.subset_count, binomial(5, p.runs_a) * binomial(5, p.runs_b));
            assert_eq!(p.unit_cost, 10.0 * f64::from(p.runs_a) + f64::from(p.runs_b));
        }
        let at = |i, j| curve.points.iter().find(|p| p.runs_a == i && p.runs_b == j).unwrap();
        assert_eq!(at(1, 0).unit_cost, 10.0);
        assert_eq!(at(0, 2).unit_cost, 2.0);
        assert_eq!(at(2, 1).subset_count, 50);
        assert!(!curve.points.iter().any(|p| p.fallback));
    }

    #[test]
    fn full_mix_matches_combined_models() {
        let (c, gold, a, b) = fixture(5);
        let curve = cost_curve(&a, &b, &gold, &c, &CostConfig::default()).unwrap();
        let full = curve.points.iter().find(|p| p.runs_a == 5 && p.runs_b == 5).unwrap();
        let mean = |r: &RunScores| -> ArticleScores {
            r.iter()
                .map(|(k, v)| {
                    let mut vals: Vec<f64> = v.values().copied().collect();
                    (k.clone(), crate::report_parser::mean_of(&mut vals))
                })
                .collect()
        };
        let combined = combine_models(&mean(&a), &mean(&b)).unwrap();
        let rho = analysis::weighted_uoa_correlation(&combined.scores, &gold, &c).unwrap();
        assert!((full.mean_rho - rho).abs() <= 1e-12, "{} vs {rho}", full.mean_rho);
    }

    #[test]
    fn missing_runs_fall_back_and_flag() {
        let (c, gold, a, mut b) = fixture(3);
        let id = c.articles[0].article_id.clone();
        b.get_mut(&id).unwrap().remove(&2);
        let cfg = CostConfig {
            runs: 3,
            ..CostConfig::default()
        };
        let curve = cost_curve(&a, &b, &gold, &c, &cfg).unwrap();
        assert_eq!(curve.short_articles, [id]);
        let at = |i, j| curve.points.iter().find(|p| p.runs_a == i && p.runs_b == j).unwrap();
        assert!(at(0, 1).fallback);
        assert!(!at(1, 0).fallback);
        assert_eq!(at(0, 1).subset_count, 3);
    }

    #[test]
    fn relabelling_runs_is_invariant() {
        let (c, gold, a, b) = fixture(4);
        let cfg = CostConfig {
            runs: 4,
            ..CostConfig::default()
        };
        let perm = [3u32, 1, 4, 2];
        let relabel = |r: &RunScores| -> RunScores {
            r.iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.iter().map(|(run, s)| (perm[*run as usize - 1], *s)).collect(),
                    )
                })
                .collect()
        };
        let base = cost_curve(&a, &b, &gold, &c, &cfg).unwrap();
        let moved = cost_curve(&relabel(&a), &relabel(&b), &gold, &c, &cfg).unwrap();
        for (p, q) in base.points.iter().zip(&moved.points) {
            assert!((p.mean_rho - q.mean_rho).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_refuses_large_n() {
        let (c, gold, a, b) = fixture(2);
        let cfg = CostConfig {
            runs: 13,
            ..CostConfig::default()
        };
        assert!(matches!(
            cost_curve(&a, &b, &gold, &c, &cfg),
            Err(CostError::TooManyRuns { .. })
        ));
    }

    fn point(i: u32, j: u32, cost: f64, rho: f64) -> ComboPoint {
        ComboPoint {
            runs_a: i,
            runs_b: j,
            unit_cost: cost,
            subset_count: 1,
            mean_rho: rho,
            fallback: false,
        }
    }

    #[test]
    fn pareto_examples() {
        let single = [point(1, 0, 10.0, 0.3)];
        assert_eq!(pareto_front(&single), single);
        let same_cost = [point(1, 0, 10.0, 0.3), point(0, 10, 10.0, 0.4)];
        assert_eq!(pareto_front(&same_cost), [same_cost[1].clone()]);
        let pts = [
            point(0, 1, 1.0, 0.2),
            point(0, 2, 2.0, 0.25),
            point(1, 0, 10.0, 0.24),
            point(1, 1, 11.0, 0.3),
        ];
        let front: Vec<_> = pareto_front(&pts).iter().map(|p| (p.runs_a, p.runs_b)).collect();
        assert_eq!(front, [(0, 1), (0, 2), (1, 1)]);
    }

    #[test]
    fn pairwise_sum_and_binomial() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(12, 6), 924);
    }
}
