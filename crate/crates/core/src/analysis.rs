//! Rank correlation against gold scores: Spearman with average ranks,
//! percentile bootstrap intervals, per-UoA tables with a pooled row,
//! theoretical-maximum scaling, weighted cross-UoA means, year trends and
//! mean-score summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Uoa};
use crate::tabular::{self, fmt_f64, fmt_opt_f64, TableError};
use crate::ArticleScores;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFew(usize),
    #[error("{0} is constant, so the rank correlation is undefined")]
    Degenerate(&'static str),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("resample count must be positive")]
    NoResamples,
    #[error(
        "bootstrap gave up after {redraws} redraws of constant resamples \
         (budget {budget}); the data is nearly constant"
    )]
    RedrawBudgetExhausted { redraws: usize, budget: usize },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("no correlations to combine")]
    Empty,
    #[error("UoA {uoa}: theoretical maximum must lie in (0, 1], got {value}")]
    InvalidMax { uoa: String, value: f64 },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{source_name}:{line}: {message}")]
    Row {
        source_name: String,
        line: u64,
        message: String,
    },
}

/// Fractional ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) hold ranks i+1..=j.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson_centered(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy, sxx, syy)
}

/// Spearman's rho: Pearson correlation of the average-rank vectors.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFew(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let (sxy, sxx, syy) = pearson_centered(&average_ranks(x), &average_ranks(y));
    if sxx == 0.0 {
        return Err(AnalysisError::Degenerate("first vector"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::Degenerate("second vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    /// Total redraws of constant resamples allowed before giving up.
    pub redraw_budget: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples: 1000,
            seed: 0,
            redraw_budget: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Constant resamples that were redrawn.
    pub redraws: usize,
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for Spearman's rho, resampling pairs.
///
/// Resample `i` draws from its own ChaCha stream (`seed`, stream `i`), so
/// the interval does not depend on thread scheduling. A resample that is
/// constant on either side is redrawn from the same stream.
pub fn bootstrap_ci(x: &[f64], y: &[f64], config: &BootstrapConfig) -> Result<BootstrapCi, AnalysisError> {
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(AnalysisError::InvalidLevel(config.level));
    }
    if config.resamples == 0 {
        return Err(AnalysisError::NoResamples);
    }
    spearman(x, y)?;
    let n = x.len();
    let budget = config.redraw_budget;
    // Only ever counts real redraws, so tripping it implies failure.
    let spent = AtomicUsize::new(0);
    let draws: Vec<Option<(f64, usize)>> = (0..config.resamples)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n]),
            |(bx, by), i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                for redraws in 0..=budget {
                    if redraws > 0 && spent.fetch_add(1, Ordering::Relaxed) >= budget {
                        return None;
                    }
                    for k in 0..n {
                        let j = rng.random_range(0..n);
                        bx[k] = x[j];
                        by[k] = y[j];
                    }
                    if let Ok(rho) = spearman(bx, by) {
                        return Some((rho, redraws));
                    }
                }
                None
            },
        )
        .collect();
    let mut stats = Vec::with_capacity(draws.len());
    let mut redraws = 0usize;
    for d in draws {
        match d {
            Some((rho, r)) => {
                stats.push(rho);
                redraws += r;
            }
            None => redraws += budget + 1,
        }
    }
    if redraws > budget || stats.len() < config.resamples {
        return Err(AnalysisError::RedrawBudgetExhausted { redraws, budget });
    }
    if redraws > 0 {
        log::warn!("bootstrap redrew {redraws} constant resamples");
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - config.level) / 2.0;
    Ok(BootstrapCi {
        low: quantile_sorted(&stats, alpha),
        high: quantile_sorted(&stats, 1.0 - alpha),
        redraws,
    })
}

/// A UoA or the pooled row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UoaKey {
    Uoa(Uoa),
    All,
}

impl fmt::Display for UoaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UoaKey::Uoa(u) => write!(f, "{u}"),
            UoaKey::All => f.write_str("ALL"),
        }
    }
}

impl std::str::FromStr for UoaKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(UoaKey::All);
        }
        let n: i64 = s
            .parse()
            .map_err(|_| format!("`{s}` is neither a UoA number nor ALL"))?;
        Uoa::new(n).map(UoaKey::Uoa).map_err(|e| e.to_string())
    }
}

impl UoaKey {
    /// Distinct bootstrap seed per row, independent of the indicator so
    /// indicators in one UoA see the same resamples.
    fn seed(self, master: u64) -> u64 {
        let tag = match self {
            UoaKey::Uoa(u) => u64::from(u.get()),
            UoaKey::All => 0,
        };
        master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub indicator_id: String,
    pub uoa: UoaKey,
    pub n: usize,
    pub rho: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub scaled_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSlice {
    pub uoa: UoaKey,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrelationTable {
    pub results: Vec<CorrelationResult>,
    pub skipped: Vec<SkippedSlice>,
}

/// Paired (indicator, gold) values per UoA over the intersection of the
/// maps, in corpus order.
fn paired_by_uoa(
    indicator: &ArticleScores,
    gold: &ArticleScores,
    corpus: &Corpus,
    keep: impl Fn(&crate::corpus::Article) -> bool,
) -> BTreeMap<Uoa, (Vec<f64>, Vec<f64>)> {
    let mut out: BTreeMap<Uoa, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in corpus.articles.iter().filter(|a| keep(a)) {
        if let (Some(&x), Some(&y)) = (indicator.get(&a.article_id), gold.get(&a.article_id)) {
            let slot = out.entry(a.uoa).or_default();
            slot.0.push(x);
            slot.1.push(y);
        }
    }
    out
}

fn correlate_slice(
    indicator_id: &str,
    key: UoaKey,
    x: &[f64],
    y: &[f64],
    bootstrap: Option<&BootstrapConfig>,
) -> Result<CorrelationResult, SkippedSlice> {
    let skip = |reason: String| SkippedSlice {
        uoa: key,
        n: x.len(),
        reason,
    };
    let rho = spearman(x, y).map_err(|e| skip(e.to_string()))?;
    let (ci_low, ci_high) = match bootstrap {
        Some(cfg) => {
            let cfg = BootstrapConfig {
                seed: key.seed(cfg.seed),
                ..cfg.clone()
            };
            match bootstrap_ci(x, y, &cfg) {
                Ok(ci) => (Some(ci.low), Some(ci.high)),
                Err(e) => {
                    log::warn!("{indicator_id} UoA {key}: no interval: {e}");
                    (None, None)
                }
            }
        }
        None => (None, None),
    };
    Ok(CorrelationResult {
        indicator_id: indicator_id.to_owned(),
        uoa: key,
        n: x.len(),
        rho,
        ci_low,
        ci_high,
        scaled_rho: None,
    })
}

/// One row per UoA with at least two usable pairs, plus an `ALL` row
/// pooling every paired article whenever at least two UoAs contribute.
pub fn per_uoa_correlations(
    indicator_id: &str,
    indicator: &ArticleScores,
    gold: &ArticleScores,
    corpus: &Corpus,
    bootstrap: Option<&BootstrapConfig>,
) -> CorrelationTable {
    let slices = paired_by_uoa(indicator, gold, corpus, |_| true);
    let mut table = CorrelationTable::default();
    let outcomes: Vec<_> = slices
        .par_iter()
        .map(|(uoa, (x, y))| correlate_slice(indicator_id, UoaKey::Uoa(*uoa), x, y, bootstrap))
        .collect();
    for o in outcomes {
        match o {
            Ok(r) => table.results.push(r),
            Err(s) => {
                log::warn!("{indicator_id} UoA {}: skipped (n = {}): {}", s.uoa, s.n, s.reason);
                table.skipped.push(s);
            }
        }
    }
    if table.results.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = slices.values().fold((vec![], vec![]), |(mut x, mut y), s| {
            x.extend_from_slice(&s.0);
            y.extend_from_slice(&s.1);
            (x, y)
        });
        match correlate_slice(indicator_id, UoaKey::All, &x, &y, bootstrap) {
            Ok(r) => table.results.push(r),
            Err(s) => table.skipped.push(s),
        }
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalMax {
    pub uoa: UoaKey,
    pub rho_max: f64,
}

/// `rho / rho_max`, deliberately not clamped to 1.
pub fn scale_to_max(result: &CorrelationResult, max: &TheoreticalMax) -> Result<CorrelationResult, AnalysisError> {
    if !(max.rho_max > 0.0 && max.rho_max <= 1.0) {
        return Err(AnalysisError::InvalidMax {
            uoa: max.uoa.to_string(),
            value: max.rho_max,
        });
    }
    Ok(CorrelationResult {
        scaled_rho: Some(result.rho / max.rho_max),
        ..result.clone()
    })
}

/// Scales every result that has a maximum; the rest stay unscaled with a
/// warning.
pub fn apply_theoretical_max(
    results: &[CorrelationResult],
    maxima: &BTreeMap<UoaKey, TheoreticalMax>,
) -> Result<Vec<CorrelationResult>, AnalysisError> {
    results
        .iter()
        .map(|r| match maxima.get(&r.uoa) {
            Some(m) => scale_to_max(r, m),
            None => {
                log::warn!(
                    "{} UoA {}: no theoretical maximum, left unscaled",
                    r.indicator_id,
                    r.uoa
                );
                Ok(r.clone())
            }
        })
        .collect()
}

/// Σ wᵢρᵢ / Σ wᵢ over `(rho, weight)` pairs.
pub fn weighted_mean_correlation(pairs: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let total: f64 = pairs.iter().map(|(_, w)| w).sum();
    if total == 0.0 {
        return Err(AnalysisError::ZeroWeights);
    }
    Ok(pairs.iter().map(|(r, w)| r * w).sum::<f64>() / total)
}

/// Per-UoA Spearman (no intervals) averaged with weights equal to each
/// UoA's paired article count. UoAs with fewer than two pairs or constant
/// data are left out.
pub fn weighted_uoa_correlation(
    indicator: &ArticleScores,
    gold: &ArticleScores,
    corpus: &Corpus,
) -> Result<f64, AnalysisError> {
    weighted_grouped_correlation(&paired_by_uoa(indicator, gold, corpus, |_| true))
}

/// [`weighted_uoa_correlation`] on pre-grouped `(indicator, gold)` vectors.
pub fn weighted_grouped_correlation(slices: &BTreeMap<Uoa, (Vec<f64>, Vec<f64>)>) -> Result<f64, AnalysisError> {
    let pairs: Vec<(f64, f64)> = slices
        .values()
        .filter_map(|(x, y)| spearman(x, y).ok().map(|r| (r, x.len() as f64)))
        .collect();
    weighted_mean_correlation(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearCell {
    pub year: i32,
    pub indicator_id: String,
    /// Articles in the UoA slices that contributed.
    pub n: usize,
    pub weighted_rho: Option<f64>,
}

/// Weighted cross-UoA correlation for each publication year and
/// indicator. Cells without any usable UoA slice have no value.
pub fn per_year_trend(indicators: &[(String, &ArticleScores)], gold: &ArticleScores, corpus: &Corpus) -> Vec<YearCell> {
    let years: BTreeSet<i32> = corpus.articles.iter().map(|a| a.pub_year).collect();
    let mut out = Vec::new();
    for &year in &years {
        for (id, scores) in indicators {
            let slices = paired_by_uoa(scores, gold, corpus, |a| a.pub_year == year);
            let usable: Vec<_> = slices
                .iter()
                .filter(|(uoa, (x, y))| match spearman(x, y) {
                    Ok(_) => true,
                    Err(e) => {
                        log::warn!("{id} year {year} UoA {uoa}: skipped (n = {}): {e}", x.len());
                        false
                    }
                })
                .collect();
            let n = usable.iter().map(|(_, (x, _))| x.len()).sum();
            out.push(YearCell {
                year,
                indicator_id: id.clone(),
                n,
                weighted_rho: weighted_grouped_correlation(&slices).ok(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub source: String,
    pub n: usize,
    pub mean: f64,
}

/// Arithmetic mean per source over the articles that every nonempty
/// source scores. Empty sources are omitted with a warning.
pub fn mean_score_summary(sources: &[(String, &ArticleScores)]) -> Vec<MeanRow> {
    let present: Vec<_> = sources
        .iter()
        .filter(|(name, s)| {
            if s.is_empty() {
                log::warn!("mean summary: `{name}` has no scores, omitted");
            }
            !s.is_empty()
        })
        .collect();
    let Some(((_, first), rest)) = present.split_first() else {
        return Vec::new();
    };
    let assessed: Vec<&String> = first
        .keys()
        .filter(|id| rest.iter().all(|(_, s)| s.contains_key(*id)))
        .collect();
    present
        .iter()
        .map(|(name, s)| {
            let sum: f64 = assessed.iter().map(|id| s[*id]).sum();
            MeanRow {
                source: name.clone(),
                n: assessed.len(),
                mean: if assessed.is_empty() {
                    f64::NAN
                } else {
                    sum / assessed.len() as f64
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub uoa: UoaKey,
    pub indicator_a: String,
    pub indicator_b: String,
    pub overlap: bool,
}

/// Whether the intervals of each indicator pair within a UoA overlap.
pub fn ci_overlaps(results: &[CorrelationResult]) -> Vec<OverlapRow> {
    let mut by_uoa: BTreeMap<UoaKey, Vec<&CorrelationResult>> = BTreeMap::new();
    for r in results {
        by_uoa.entry(r.uoa).or_default().push(r);
    }
    let mut out = Vec::new();
    for (uoa, rows) in by_uoa {
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                if let (Some(al), Some(ah), Some(bl), Some(bh)) = (a.ci_low, a.ci_high, b.ci_low, b.ci_high) {
                    out.push(OverlapRow {
                        uoa,
                        indicator_a: a.indicator_id.clone(),
                        indicator_b: b.indicator_id.clone(),
                        overlap: al <= bh && bl <= ah,
                    });
                }
            }
        }
    }
    out
}

/// Reads columns `uoa, rho_max`; `uoa` may be `ALL`.
pub fn read_theoretical_max<R: Read>(
    source_name: &str,
    input: R,
) -> Result<BTreeMap<UoaKey, TheoreticalMax>, AnalysisError> {
    let mut rdr = tabular::reader(input, b',');
    let header = tabular::read_header(source_name, &mut rdr)?;
    let uoa_col = header.require(source_name, "uoa")?;
    let max_col = header.require(source_name, "rho_max")?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| TableError::from_csv(source_name, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let row_err = |message: String| AnalysisError::Row {
            source_name: source_name.to_owned(),
            line,
            message,
        };
        let uoa: UoaKey = row.get(uoa_col).unwrap_or("").parse().map_err(row_err)?;
        let raw = row.get(max_col).unwrap_or("").trim();
        let rho_max: f64 = raw
            .parse()
            .map_err(|_| row_err(format!("rho_max `{raw}` is not a number")))?;
        if !(rho_max > 0.0 && rho_max <= 1.0) {
            return Err(row_err(format!("rho_max {rho_max} is outside (0, 1]")));
        }
        if out.insert(uoa, TheoreticalMax { uoa, rho_max }).is_some() {
            return Err(row_err(format!("duplicate UoA {uoa}")));
        }
    }
    Ok(out)
}

pub fn write_theoretical_max<W: Write>(maxima: &BTreeMap<UoaKey, TheoreticalMax>, out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["uoa", "rho_max"])?;
    for m in maxima.values() {
        w.write_record([m.uoa.to_string(), fmt_f64(m.rho_max)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlations<W: Write>(results: &[CorrelationResult], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["indicator_id", "uoa", "n", "rho", "ci_low", "ci_high", "scaled_rho"])?;
    for r in results {
        w.write_record([
            r.indicator_id.clone(),
            r.uoa.to_string(),
            r.n.to_string(),
            fmt_f64(r.rho),
            fmt_opt_f64(r.ci_low),
            fmt_opt_f64(r.ci_high),
            fmt_opt_f64(r.scaled_rho),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_skipped<W: Write>(indicator_id: &str, skipped: &[SkippedSlice], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["indicator_id", "uoa", "n", "reason"])?;
    for s in skipped {
        w.write_record([indicator_id, &s.uoa.to_string(), &s.n.to_string(), &s.reason])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_overlaps<W: Write>(rows: &[OverlapRow], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["uoa", "indicator_a", "indicator_b", "ci_overlap"])?;
    for r in rows {
        w.write_record([
            r.uoa.to_string(),
            r.indicator_a.clone(),
            r.indicator_b.clone(),
            r.overlap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_year_trend<W: Write>(cells: &[YearCell], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["year", "indicator_id", "n", "weighted_rho"])?;
    for c in cells {
        w.write_record([
            c.year.to_string(),
            c.indicator_id.clone(),
            c.n.to_string(),
            fmt_opt_f64(c.weighted_rho),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mean_summary<W: Write>(rows: &[MeanRow], out: W) -> csv::Result<()> {
    let mut w = tabular::writer(out);
    w.write_record(["source", "n", "mean"])?;
    for r in rows {
        w.write_record([r.source.clone(), r.n.to_string(), fmt_f64(r.mean)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Article;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::Degenerate(_))
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(AnalysisError::TooFew(1))));
        assert!(matches!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(AnalysisError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            spearman(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(AnalysisError::NonFinite)
        ));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), [2.0, 3.5, 3.5, 1.0]);
        assert_eq!(average_ranks(&[1.0, 1.0, 1.0]), [2.0, 2.0, 2.0]);
    }

    fn cfg(seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            seed,
            resamples: 400,
            ..BootstrapConfig::default()
        }
    }

    #[test]
    fn bootstrap_deterministic() {
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 61) as f64).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 11) % 13) as f64 + i as f64 / 10.0).collect();
        let a = bootstrap_ci(&x, &y, &cfg(7)).unwrap();
        let b = bootstrap_ci(&x, &y, &cfg(7)).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(single.install(|| bootstrap_ci(&x, &y, &cfg(7)).unwrap()), a);
        assert_ne!(bootstrap_ci(&x, &y, &cfg(8)).unwrap(), a);
        assert!(a.low <= a.high);
    }

    #[test]
    fn bootstrap_perfect_agreement() {
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let ci = bootstrap_ci(&x, &x, &cfg(1)).unwrap();
        assert_eq!((ci.low, ci.high), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_budget_exhausted_on_near_constant() {
        let mut x = vec![1.0; 200];
        x[0] = 2.0;
        let y: Vec<f64> = (0..200).map(f64::from).collect();
        let err = bootstrap_ci(
            &x,
            &y,
            &BootstrapConfig {
                redraw_budget: 10,
                ..cfg(3)
            },
        )
        .unwrap_err();
        assert!(matches!(err, AnalysisError::RedrawBudgetExhausted { .. }));
        assert!(err.to_string().contains("nearly constant"));
    }

    #[test]
    fn bootstrap_rejects_bad_level() {
        let x = [1.0, 2.0, 3.0];
        let c = BootstrapConfig { level: 1.0, ..cfg(1) };
        assert!(matches!(bootstrap_ci(&x, &x, &c), Err(AnalysisError::InvalidLevel(_))));
    }

    fn article(id: &str, uoa: i64, year: i32) -> Article {
        Article {
            article_id: id.into(),
            title: "t".into(),
            abstract_text: "a".into(),
            uoa: Uoa::new(uoa).unwrap(),
            institution_id: "i".into(),
            pub_year: year,
            doi: None,
        }
    }

    fn corpus(spec: &[(&str, i64, i32)]) -> Corpus {
        Corpus {
            articles: spec.iter().map(|(id, u, y)| article(id, *u, *y)).collect(),
            ..Corpus::default()
        }
    }

    fn scores(pairs: &[(&str, f64)]) -> ArticleScores {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    #[test]
    fn per_uoa_rows_and_pooled() {
        let c = corpus(&[
            ("a", 1, 2018),
            ("b", 1, 2018),
            ("c", 1, 2019),
            ("d", 7, 2019),
            ("e", 7, 2019),
            ("f", 7, 2020),
            ("g", 13, 2020),
        ]);
        let gold = scores(&[
            ("a", 1.0),
            ("b", 2.0),
            ("c", 3.0),
            ("d", 1.0),
            ("e", 2.0),
            ("f", 3.0),
            ("g", 2.0),
        ]);
        let ind = scores(&[
            ("a", 1.0),
            ("b", 2.0),
            ("c", 3.0),
            ("d", 3.0),
            ("e", 2.0),
            ("f", 1.0),
            ("g", 9.0),
        ]);
        let t = per_uoa_correlations("x", &ind, &gold, &c, None);
        let keys: Vec<String> = t.results.iter().map(|r| r.uoa.to_string()).collect();
        assert_eq!(keys, ["1", "7", "ALL"]);
        assert_eq!(t.results[0].rho, 1.0);
        assert_eq!(t.results[1].rho, -1.0);
        // The pooled row keeps articles from UoAs too small to correlate alone.
        assert_eq!(t.results[2].n, 7);
        assert_eq!(t.skipped.len(), 1);
        assert_eq!(t.skipped[0].uoa.to_string(), "13");

        // One contributing UoA: no pooled row.
        let only = per_uoa_correlations("x", &ind, &gold, &corpus(&[("a", 1, 1), ("b", 1, 1)]), None);
        assert_eq!(only.results.len(), 1);
    }

    #[test]
    fn equal_gold_pair_is_degenerate() {
        let c = corpus(&[("a", 1, 1), ("b", 1, 1)]);
        let gold = scores(&[("a", 2.5), ("b", 2.5)]);
        let ind = scores(&[("a", 1.0), ("b", 2.0)]);
        let t = per_uoa_correlations("x", &ind, &gold, &c, None);
        assert!(t.results.is_empty());
        assert!(t.skipped[0].reason.contains("constant"));
    }

    #[test]
    fn scaling_examples() {
        let r = |rho| CorrelationResult {
            indicator_id: "x".into(),
            uoa: UoaKey::All,
            n: 10,
            rho,
            ci_low: None,
            ci_high: None,
            scaled_rho: None,
        };
        let m = |v| TheoreticalMax {
            uoa: UoaKey::All,
            rho_max: v,
        };
        assert!((scale_to_max(&r(0.3), &m(0.6)).unwrap().scaled_rho.unwrap() - 0.5).abs() < 1e-15);
        let over = scale_to_max(&r(0.65), &m(0.6)).unwrap().scaled_rho.unwrap();
        assert!(over > 1.0 && (over - 0.65 / 0.6).abs() < 1e-15);
        assert!((scale_to_max(&r(-0.1), &m(0.5)).unwrap().scaled_rho.unwrap() + 0.2).abs() < 1e-15);
        assert!(scale_to_max(&r(0.1), &m(0.0)).is_err());

        let maxima: BTreeMap<_, _> = [(UoaKey::All, m(0.5))].into();
        let mut other = r(0.2);
        other.uoa = UoaKey::Uoa(Uoa::new(3).unwrap());
        let scaled = apply_theoretical_max(&[r(0.2), other], &maxima).unwrap();
        assert_eq!(scaled[0].scaled_rho, Some(0.4));
        assert_eq!(scaled[1].scaled_rho, None);
    }

    #[test]
    fn weighted_mean_examples() {
        assert!((weighted_mean_correlation(&[(0.2, 1.0), (0.4, 1.0)]).unwrap() - 0.3).abs() < 1e-15);
        assert!((weighted_mean_correlation(&[(0.2, 3.0), (0.4, 1.0)]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(weighted_mean_correlation(&[(0.7, 5.0)]).unwrap(), 0.7);
        assert!(matches!(
            weighted_mean_correlation(&[(0.7, 0.0)]),
            Err(AnalysisError::ZeroWeights)
        ));
    }

    #[test]
    fn year_trend_identity_and_single_year() {
        let c = corpus(&[
            ("a", 1, 2018),
            ("b", 1, 2018),
            ("c", 7, 2018),
            ("d", 7, 2018),
            ("e", 7, 2018),
        ]);
        let gold = scores(&[("a", 1.0), ("b", 2.0), ("c", 1.0), ("d", 2.0), ("e", 3.0)]);
        let cells = per_year_trend(&[("gold".to_owned(), &gold)], &gold, &c);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].weighted_rho, Some(1.0));
        assert_eq!(cells[0].n, 5);
    }

    #[test]
    fn mean_summary_uses_common_articles() {
        let gold = scores(&[("a", 3.0), ("b", 3.0), ("c", 3.0)]);
        let m = scores(&[("a", 3.5), ("b", 2.5)]);
        let empty = ArticleScores::new();
        let rows = mean_score_summary(&[("gold".into(), &gold), ("m".into(), &m), ("none".into(), &empty)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean, 3.0);
        assert_eq!(rows[0].n, 2);
        assert_eq!(rows[1].mean, 3.0);
    }

    #[test]
    fn overlap_flags() {
        let r = |id: &str, lo, hi| CorrelationResult {
            indicator_id: id.into(),
            uoa: UoaKey::All,
            n: 10,
            rho: (lo + hi) / 2.0,
            ci_low: Some(lo),
            ci_high: Some(hi),
            scaled_rho: None,
        };
        let rows = ci_overlaps(&[r("a", 0.1, 0.3), r("b", 0.25, 0.5), r("c", 0.6, 0.7)]);
        let flags: Vec<_> = rows
            .iter()
            .map(|o| (o.indicator_a.as_str(), o.indicator_b.as_str(), o.overlap))
            .collect();
        assert_eq!(flags, [("a", "b", true), ("a", "c", false), ("b", "c", false)]);
    }

    #[test]
    fn theoretical_max_file() {
        let text = "uoa,rho_max\n3,0.6\nALL,0.55\n";
        let m = read_theoretical_max("t.csv", text.as_bytes()).unwrap();
        assert_eq!(m[&UoaKey::All].rho_max, 0.55);
        let mut buf = Vec::new();
        write_theoretical_max(&m, &mut buf).unwrap();
        assert_eq!(read_theoretical_max("t.csv", buf.as_slice()).unwrap(), m);
        for bad in [
            "uoa,rho_max\n3,0\n",
            "uoa,rho_max\n35,0.5\n",
            "uoa,rho_max\n3,0.5\n3,0.4\n",
        ] {
            assert!(read_theoretical_max("t.csv", bad.as_bytes()).is_err(), "{bad}");
        }
    }

    /// Naive average ranks: for each value, mean position among equal values.
    fn naive_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn distinct_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        Just((0..n).map(|i| i as f64).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn closed_form_without_ties((x, y) in (2usize..20).prop_flat_map(|n| (distinct_vec(n), distinct_vec(n)))) {
            let n = x.len() as f64;
            let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let closed = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
            prop_assert!((spearman(&x, &y).unwrap() - closed).abs() < 1e-12);
        }

        #[test]
        fn ranks_match_naive(v in prop::collection::vec(0u8..5, 1..30)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert_eq!(average_ranks(&v), naive_ranks(&v));
        }

        #[test]
        fn symmetric_and_monotone_invariant(
            (x, y) in (3usize..25).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            if let Ok(r) = spearman(&x, &y) {
                prop_assert!((spearman(&y, &x).unwrap() - r).abs() < 1e-12);
                let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let ly: Vec<f64> = y.iter().map(|v| 2.0 * v + 7.0).collect();
                prop_assert!((spearman(&ex, &ly).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn equal_weights_give_plain_mean(rhos in prop::collection::vec(-1.0f64..1.0, 1..12), w in 0.5f64..50.0) {
            let pairs: Vec<_> = rhos.iter().map(|&r| (r, w)).collect();
            let plain = rhos.iter().sum::<f64>() / rhos.len() as f64;
            prop_assert!((weighted_mean_correlation(&pairs).unwrap() - plain).abs() < 1e-12);
        }

        #[test]
        fn scaling_keeps_sign_and_order(rhos in prop::collection::vec(-1.0f64..1.0, 2..10), max in 0.05f64..1.0) {
            let m = TheoreticalMax { uoa: UoaKey::All, rho_max: max };
            let scaled: Vec<f64> = rhos.iter().map(|&rho| {
                let r = CorrelationResult {
                    indicator_id: "x".into(), uoa: UoaKey::All, n: 2, rho,
                    ci_low: None, ci_high: None, scaled_rho: None,
                };
                scale_to_max(&r, &m).unwrap().scaled_rho.unwrap()
            }).collect();
            for i in 0..rhos.len() {
                prop_assert_eq!(rhos[i].signum(), scaled[i].signum());
                for j in 0..rhos.len() {
                    if rhos[i] < rhos[j] { prop_assert!(scaled[i] < scaled[j]); }
                }
            }
        }
    }
}
