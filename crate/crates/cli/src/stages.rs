//! Pipeline stages. Each reads its inputs from the output directory (or the
//! config), writes its tables into its own subdirectory and drops a
//! `MANIFEST.json` next to them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use refqual::analysis::{self, CorrelationResult};
use refqual::corpus::{self, Corpus, RowReject};
use refqual::costmodel::{self, CostConfig};
use refqual::gateway::{
    self, ArticlePrompt, LiveBackend, MockBackend, RawReport, RetryPolicy, ScoreCache, ScoringBackend, SubmitOptions,
};
use refqual::indicators;
use refqual::prompts::PromptRegistry;
use refqual::report_parser::{self, ParsedScore, Resolution};
use refqual::synthetic;
use refqual::tabular::{self, fmt_f64};
use refqual::ArticleScores;

use crate::config::{BackendKind, CampaignConfig};
use crate::error::CliError;
use crate::manifest::{display_path, ManifestBuilder, MANIFEST_FILE};

/// Stage subdirectories and file names under the output directory.
pub mod layout {
    pub const CORPUS: &str = "corpus";
    pub const SCORES: &str = "scores";
    pub const PARSED: &str = "parsed";
    pub const AGGREGATE: &str = "aggregate";
    pub const NLCS: &str = "nlcs";
    pub const ANALYSIS: &str = "analysis";
    pub const TREND: &str = "trend";
    pub const MEANS: &str = "means";
    pub const COST: &str = "cost";
    pub const REPORT: &str = "report";

    pub const ARTICLES: &str = "articles.csv";
    pub const PROFILES: &str = "profiles.csv";
    pub const GOLD: &str = "gold.csv";
    pub const REMOVED: &str = "removed.csv";
    pub const REJECTS: &str = "rejects.csv";
    pub const REPORTS: &str = "reports.jsonl";
    pub const LEDGER: &str = "ledger.jsonl";
    pub const FAILURES: &str = "failures.csv";
    pub const SCORE_STORE: &str = "scores.csv";
    pub const UNRESOLVED: &str = "unresolved.csv";
    pub const EXCLUSIONS: &str = "exclusions.csv";
    pub const RESOLUTIONS: &str = "resolutions.csv";
    pub const RUN_MEANS: &str = "run_means.csv";
    pub const COMBINED: &str = "combined.csv";
    pub const EXCLUDED: &str = "excluded.csv";
    pub const NLCS_VALUES: &str = "nlcs.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.csv";
    pub const CORRELATIONS: &str = "correlations.csv";
    pub const SKIPPED: &str = "skipped.csv";
    pub const CI_OVERLAP: &str = "ci_overlap.csv";
    pub const YEAR_TREND: &str = "year_trend.csv";
    pub const MEAN_SUMMARY: &str = "mean_summary.csv";
    pub const COST_CURVE: &str = "cost_curve.csv";
}

/// Indicator id of the two-model combination.
pub const COMBINED_ID: &str = "combined";

/// Resolved configuration plus flag overrides for one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: CampaignConfig,
    pub base_dir: PathBuf,
    pub config_sha256: String,
    pub out: PathBuf,
    pub cost_a: Option<f64>,
    pub cost_b: Option<f64>,
}

impl Ctx {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn dir(&self, stage: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(stage);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        Ok(d)
    }

    /// Path of an upstream artifact, or an error naming its producer.
    fn require(&self, stage: &str, file: &str, producer: &str) -> Result<PathBuf, CliError> {
        let p = self.out.join(stage).join(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::missing(&p, producer))
        }
    }

    fn manifest(&self, stage: &str) -> ManifestBuilder {
        ManifestBuilder::new(stage, &self.out, &self.config_sha256)
    }

    fn registry(&self) -> Result<PromptRegistry, CliError> {
        match &self.config.prompts.dir {
            Some(d) => PromptRegistry::load_dir(&self.resolve(d)).map_err(CliError::data),
            None => Ok(PromptRegistry::bundled()),
        }
    }

    /// The filtered corpus and its gold scores, as written by `ingest`.
    pub fn load_ingested(&self) -> Result<(Corpus, ArticleScores), CliError> {
        let articles = self.require(layout::CORPUS, layout::ARTICLES, "ingest")?;
        let profiles = self.require(layout::CORPUS, layout::PROFILES, "ingest")?;
        let gold = self.require(layout::CORPUS, layout::GOLD, "ingest")?;
        let corpus = corpus::load_corpus(&articles, &profiles).map_err(CliError::data)?;
        let gold = synthetic::read_scores(&gold, "gold").map_err(CliError::data)?;
        Ok((corpus, gold))
    }

    fn model_pair(&self) -> Result<(&str, &str), CliError> {
        match self.config.models.as_slice() {
            [a, b, ..] => Ok((&a.id, &b.id)),
            _ => Err(CliError::Usage("this stage needs two models in [[models]]".into())),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub loaded: usize,
    pub kept: usize,
    pub removed: usize,
    pub rejects: usize,
}

/// Articles whose department has no profile cannot get a gold score; they
/// leave before the length filter so the fraction applies to usable ones.
fn drop_unprofiled(corpus: &mut Corpus) -> Vec<RowReject> {
    let known: HashSet<(&str, corpus::Uoa)> = corpus
        .profiles
        .iter()
        .map(|p| (p.institution_id.as_str(), p.uoa))
        .collect();
    let (keep, drop): (Vec<_>, Vec<_>) = std::mem::take(&mut corpus.articles)
        .into_iter()
        .partition(|a| known.contains(&(a.institution_id.as_str(), a.uoa)));
    let rejects = drop
        .iter()
        .map(|a| {
            log::warn!(
                "article {}: no profile for ({}, UoA {})",
                a.article_id,
                a.institution_id,
                a.uoa
            );
            RowReject {
                source: "profiles".into(),
                line: 0,
                key: a.article_id.clone(),
                reason: format!("no department profile for ({}, UoA {})", a.institution_id, a.uoa),
            }
        })
        .collect();
    corpus.articles = keep;
    rejects
}

pub fn ingest(ctx: &Ctx) -> Result<IngestSummary, CliError> {
    let cfg = &ctx.config.corpus;
    let articles_in = ctx.resolve(&cfg.articles);
    let profiles_in = ctx.resolve(&cfg.profiles);
    let mut corpus = corpus::load_corpus(&articles_in, &profiles_in).map_err(CliError::data)?;
    let loaded = corpus.articles.len();
    for r in &corpus.rejects {
        log::warn!("{}:{}: rejected {}: {}", r.source, r.line, r.key, r.reason);
    }
    let mut rejects = std::mem::take(&mut corpus.rejects);
    rejects.extend(drop_unprofiled(&mut corpus));

    let lengths: HashMap<&str, (corpus::Uoa, usize)> = corpus
        .articles
        .iter()
        .map(|a| {
            let len = corpus::abstract_length(&a.abstract_text, cfg.length_metric);
            (a.article_id.as_str(), (a.uoa, len))
        })
        .collect();
    let (kept, report) =
        corpus::filter_short_abstracts(&corpus, cfg.filter_fraction, cfg.length_metric).map_err(CliError::data)?;
    let gold = corpus::attach_gold_scores(&kept).map_err(CliError::data)?;

    let dir = ctx.dir(layout::CORPUS)?;
    let mut m = ctx.manifest("ingest");
    m.input(&articles_in)?.input(&profiles_in)?;

    let p = dir.join(layout::ARTICLES);
    corpus::write_articles(&kept.articles, create(&p)?)?;
    m.output(&p)?;
    let p = dir.join(layout::PROFILES);
    corpus::write_profiles(&kept.profiles, create(&p)?)?;
    m.output(&p)?;
    let p = dir.join(layout::GOLD);
    synthetic::write_scores(&p, "gold", &gold).map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;

    let p = dir.join(layout::REMOVED);
    let mut w = tabular::writer(create(&p)?);
    w.write_record(["article_id", "uoa", "length", "threshold"])?;
    for id in &report.removed {
        let (uoa, len) = lengths[id.as_str()];
        let threshold = report.cuts[&uoa].threshold.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([id.as_str(), &uoa.to_string(), &len.to_string(), &threshold])?;
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;

    let p = dir.join(layout::REJECTS);
    corpus::write_rejects(&rejects, create(&p)?)?;
    m.output(&p)?;

    m.param("filter_fraction", cfg.filter_fraction)
        .param("length_metric", cfg.length_metric)
        .param("cuts", &report.cuts);
    m.write(&dir)?;
    Ok(IngestSummary {
        loaded,
        kept: kept.articles.len(),
        removed: report.removed.len(),
        rejects: rejects.len(),
    })
}

// -------------------------------------------------------- prompt-preview

pub fn prompt_preview(ctx: &Ctx, ids: &[String], limit: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let corpus = match ctx.load_ingested() {
        Ok((c, _)) => c,
        Err(_) => {
            let cfg = &ctx.config.corpus;
            corpus::load_corpus(&ctx.resolve(&cfg.articles), &ctx.resolve(&cfg.profiles)).map_err(CliError::data)?
        }
    };
    let registry = ctx.registry()?;
    let chosen: Vec<_> = if ids.is_empty() {
        corpus.articles.iter().take(limit).collect()
    } else {
        ids.iter()
            .map(|id| {
                corpus
                    .article(id)
                    .ok_or_else(|| CliError::Data(format!("article `{id}` is not in the corpus")))
            })
            .collect::<Result<_, _>>()?
    };
    let io = |e: std::io::Error| CliError::Data(format!("stdout: {e}"));
    for a in chosen {
        let pair = registry.build_prompt(a).map_err(CliError::data)?;
        writeln!(out, "=== {} (UoA {}) ===", a.article_id, a.uoa).map_err(io)?;
        writeln!(out, "--- system ---\n{}", pair.system_text).map_err(io)?;
        writeln!(out, "--- user ---\n{}\n", pair.user_text).map_err(io)?;
    }
    Ok(())
}

// ----------------------------------------------------------------- score

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub backend: String,
    pub requests: usize,
    pub reports: usize,
    pub failures: usize,
    pub cache_hits: usize,
    pub total_cost: f64,
}

fn build_backend(ctx: &Ctx, gold: &ArticleScores) -> Result<(Box<dyn ScoringBackend>, Option<PathBuf>), CliError> {
    let s = &ctx.config.scoring;
    match s.backend {
        BackendKind::Live => {
            let b = LiveBackend::from_env(&s.endpoint, &s.api_key_env, Duration::from_secs(s.timeout_secs))?;
            Ok((Box::new(b), None))
        }
        BackendKind::Mock => {
            let (latent, path) = match &s.latent {
                Some(p) => {
                    let p = ctx.resolve(p);
                    (synthetic::read_scores(&p, "latent").map_err(CliError::data)?, Some(p))
                }
                None => {
                    log::warn!("scoring.latent is unset; the mock backend tracks gold scores");
                    (gold.clone(), None)
                }
            };
            let mut b = MockBackend::new(s.seed, latent.into_iter().collect());
            for m in &ctx.config.models {
                b = b.with_profile(m.id.clone(), m.mock.clone());
            }
            Ok((Box::new(b), path))
        }
    }
}

pub fn score(ctx: &Ctx) -> Result<ScoreSummary, CliError> {
    if ctx.config.models.is_empty() {
        return Err(CliError::Usage("no [[models]] configured".into()));
    }
    let (corpus, gold) = ctx.load_ingested()?;
    let registry = ctx.registry()?;
    let s = &ctx.config.scoring;
    let prompts = corpus
        .articles
        .iter()
        .map(|a| {
            Ok(ArticlePrompt {
                article_id: a.article_id.clone(),
                prompt: registry.build_prompt(a).map_err(CliError::data)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let models: Vec<_> = ctx.config.models.iter().map(|m| m.spec()).collect();
    let requests = gateway::schedule_campaign(&prompts, &models, s.repetitions)?;

    let (backend, latent_path) = build_backend(ctx, &gold)?;
    let tag = backend.tag();
    let cache_dir = ctx.resolve(&s.cache_dir);
    let cache = ScoreCache::open(&cache_dir, &tag).map_err(|e| CliError::Data(e.to_string()))?;
    let retry = match s.backend {
        BackendKind::Mock => RetryPolicy::immediate(s.max_retries),
        BackendKind::Live => RetryPolicy {
            max_retries: s.max_retries,
            ..RetryPolicy::default()
        },
    };
    let options = SubmitOptions {
        parallelism: s.parallelism.max(1),
        retry,
    };
    let outcome = gateway::submit(&requests, &models, backend.as_ref(), &cache, &options)?;

    let dir = ctx.dir(layout::SCORES)?;
    let mut m = ctx.manifest("score");
    m.input(&ctx.out.join(layout::CORPUS).join(layout::ARTICLES))?;
    if let Some(p) = &latent_path {
        m.input(p)?;
    }

    let p = dir.join(layout::REPORTS);
    let mut w = create(&p)?;
    for r in &outcome.reports {
        serde_json::to_writer(&mut w, r).map_err(CliError::data)?;
        w.write_all(b"\n").map_err(|e| CliError::io(&p, e))?;
    }
    finish(w, &p)?;
    m.output(&p)?;

    let p = dir.join(layout::LEDGER);
    let mut w = create(&p)?;
    outcome.ledger.write_jsonl(&mut w).map_err(|e| CliError::io(&p, e))?;
    finish(w, &p)?;
    m.output(&p)?;

    let p = dir.join(layout::FAILURES);
    let mut w = tabular::writer(create(&p)?);
    w.write_record(["article_id", "model_id", "run_index", "attempts", "reason"])?;
    for f in &outcome.failures {
        log::warn!("{}: {} after {} attempt(s)", f.key, f.reason, f.attempts);
        w.write_record([
            f.key.article_id.as_str(),
            &f.key.model_id,
            &f.key.run_index.to_string(),
            &f.attempts.to_string(),
            &f.reason,
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;

    m.prompts(registry.checksums())
        .param("backend", &tag)
        .param("seed", s.seed)
        .param("repetitions", s.repetitions)
        .param("models", &models)
        .param("cache", display_path(&ctx.base_dir, &cache_dir));
    m.write(&dir)?;

    Ok(ScoreSummary {
        backend: tag,
        requests: requests.len(),
        reports: outcome.reports.len(),
        failures: outcome.failures.len(),
        cache_hits: outcome.ledger.count(gateway::Outcome::CacheHit),
        total_cost: outcome.ledger.total_cost(),
    })
}

pub fn read_reports(path: &Path) -> Result<Vec<RawReport>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

// ----------------------------------------------------------------- parse

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseSummary {
    pub scored: usize,
    pub excluded: usize,
    pub unresolved: usize,
}

fn load_resolutions(path: &Path) -> Result<Vec<Resolution>, CliError> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let data = read_bytes(path)?;
    report_parser::read_resolutions(&path.display().to_string(), data.as_slice()).map_err(CliError::data)
}

pub fn parse(ctx: &Ctx) -> Result<ParseSummary, CliError> {
    let reports_path = ctx.require(layout::SCORES, layout::REPORTS, "score")?;
    let reports = read_reports(&reports_path)?;
    let dir = ctx.dir(layout::PARSED)?;
    let res_path = dir.join(layout::RESOLUTIONS);
    let resolutions = load_resolutions(&res_path)?;
    let batch = report_parser::parse_batch(&reports, &resolutions);

    let mut m = ctx.manifest("parse");
    m.input(&reports_path)?;
    if res_path.is_file() {
        m.input(&res_path)?;
    }
    let p = dir.join(layout::SCORE_STORE);
    report_parser::write_score_store(&batch.scores, create(&p)?)?;
    m.output(&p)?;
    let p = dir.join(layout::UNRESOLVED);
    report_parser::write_unresolved(&batch.unresolved, create(&p)?)?;
    m.output(&p)?;
    let p = dir.join(layout::EXCLUSIONS);
    report_parser::write_exclusions(&batch.exclusions, create(&p)?)?;
    m.output(&p)?;
    m.write(&dir)?;

    if !batch.unresolved.is_empty() {
        log::warn!(
            "{} report(s) need manual resolution; run `refqual resolve`, then `refqual parse` again",
            batch.unresolved.len()
        );
    }
    Ok(ParseSummary {
        scored: batch.scores.len(),
        excluded: batch.exclusions.len(),
        unresolved: batch.unresolved.len(),
    })
}

// --------------------------------------------------------------- resolve

/// Walks the manual queue, asking for one answer per report. Answers are
/// saved after each item; a blank line or end of input stops early.
pub fn resolve(ctx: &Ctx, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<usize, CliError> {
    let queue_path = ctx.require(layout::PARSED, layout::UNRESOLVED, "parse")?;
    let data = read_bytes(&queue_path)?;
    let queue =
        report_parser::read_unresolved(&queue_path.display().to_string(), data.as_slice()).map_err(CliError::data)?;
    let res_path = queue_path.with_file_name(layout::RESOLUTIONS);
    let mut answers = load_resolutions(&res_path)?;
    let done: HashSet<_> = answers.iter().map(|r| r.key.clone()).collect();
    let pending: Vec<_> = queue.iter().filter(|i| !done.contains(&i.key)).collect();

    let io = |e: std::io::Error| CliError::Data(format!("terminal: {e}"));
    let mut answered = 0;
    'items: for (k, item) in pending.iter().enumerate() {
        writeln!(
            out,
            "\n[{}/{}] {}\n{}\n",
            k + 1,
            pending.len(),
            item.key,
            item.report_text
        )
        .map_err(io)?;
        loop {
            write!(out, "score 1-4, or `{}` (blank to stop): ", report_parser::NO_SCORE).map_err(io)?;
            out.flush().map_err(io)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io)? == 0 || line.trim().is_empty() {
                break 'items;
            }
            match report_parser::resolve_manually(item, &line) {
                Ok(decision) => {
                    answers.push(Resolution::from_decision(&decision));
                    report_parser::write_resolutions(&answers, create(&res_path)?)?;
                    answered += 1;
                    break;
                }
                Err(e) => writeln!(out, "{e}").map_err(io)?,
            }
        }
    }
    let left = pending.len() - answered;
    writeln!(out, "{answered} answered, {left} left; run `refqual parse` to apply").map_err(io)?;
    Ok(answered)
}

// ------------------------------------------------------------- aggregate

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateSummary {
    pub per_model: BTreeMap<String, usize>,
    pub combined: Option<usize>,
}

fn load_scores(ctx: &Ctx) -> Result<(PathBuf, Vec<ParsedScore>), CliError> {
    let p = ctx.require(layout::PARSED, layout::SCORE_STORE, "parse")?;
    let data = read_bytes(&p)?;
    let scores = report_parser::read_score_store(&p.display().to_string(), data.as_slice()).map_err(CliError::data)?;
    Ok((p, scores))
}

pub fn aggregate(ctx: &Ctx) -> Result<AggregateSummary, CliError> {
    let (corpus, _) = ctx.load_ingested()?;
    let (scores_path, scores) = load_scores(ctx)?;
    let expected: Vec<String> = corpus.articles.iter().map(|a| a.article_id.clone()).collect();
    let nominal = ctx.config.scoring.repetitions as usize;
    let means = report_parser::average_runs(&scores, nominal, &expected);

    let dir = ctx.dir(layout::AGGREGATE)?;
    let mut m = ctx.manifest("aggregate");
    m.input(&scores_path)?.param("repetitions", nominal);

    let mut excluded: Vec<(String, String, String)> = Vec::new();
    let mut per_model = BTreeMap::new();
    let p = dir.join(layout::RUN_MEANS);
    let mut w = tabular::writer(create(&p)?);
    w.write_record(["model_id", "article_id", "mean", "runs", "short"])?;
    for model in &ctx.config.models {
        let Some(mm) = means.get(&model.id) else {
            log::warn!("model {} has no parsed scores", model.id);
            per_model.insert(model.id.clone(), 0);
            continue;
        };
        for (id, r) in &mm.means {
            w.write_record([
                model.id.as_str(),
                id,
                &fmt_f64(r.mean),
                &r.runs.to_string(),
                if r.short { "1" } else { "0" },
            ])?;
        }
        excluded.extend(
            mm.excluded
                .iter()
                .map(|(a, why)| (model.id.clone(), a.clone(), why.clone())),
        );
        per_model.insert(model.id.clone(), mm.means.len());
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;

    let mut combined_n = None;
    if let Ok((a, b)) = ctx.model_pair() {
        let sa = means.get(a).map(|x| x.scores()).unwrap_or_default();
        let sb = means.get(b).map(|x| x.scores()).unwrap_or_default();
        let combined = report_parser::combine_models(&sa, &sb).map_err(CliError::data)?;
        for id in &combined.dropped {
            excluded.push((COMBINED_ID.into(), id.clone(), "scored by one model only".into()));
        }
        let p = dir.join(layout::COMBINED);
        synthetic::write_scores(&p, COMBINED_ID, &combined.scores).map_err(|e| CliError::io(&p, e))?;
        m.output(&p)?.param("combined_models", [a, b]);
        combined_n = Some(combined.scores.len());
        if ctx.config.models.len() > 2 {
            m.note("the combined indicator averages the first two configured models");
        }
    }

    let p = dir.join(layout::EXCLUDED);
    let mut w = tabular::writer(create(&p)?);
    w.write_record(["model_id", "article_id", "reason"])?;
    for (model, id, why) in &excluded {
        w.write_record([model, id, why])?;
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;
    m.write(&dir)?;
    Ok(AggregateSummary {
        per_model,
        combined: combined_n,
    })
}

fn read_run_means(path: &Path) -> Result<BTreeMap<String, ArticleScores>, CliError> {
    let name = path.display().to_string();
    let data = read_bytes(path)?;
    let mut rdr = tabular::reader(data.as_slice(), b',');
    let header = tabular::read_header(&name, &mut rdr).map_err(CliError::data)?;
    let model = header.require(&name, "model_id").map_err(CliError::data)?;
    let id = header.require(&name, "article_id").map_err(CliError::data)?;
    let mean = header.require(&name, "mean").map_err(CliError::data)?;
    let mut out: BTreeMap<String, ArticleScores> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(tabular::TableError::from_csv(&name, &e)))?;
        let raw = rec.get(mean).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| {
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            CliError::Data(format!("{name}:{line}: `{raw}` is not a number"))
        })?;
        out.entry(rec.get(model).unwrap_or("").to_owned())
            .or_default()
            .insert(rec.get(id).unwrap_or("").to_owned(), v);
    }
    Ok(out)
}

/// Per-model means in config order, then the combination when present.
fn load_model_indicators(ctx: &Ctx, m: &mut ManifestBuilder) -> Result<Vec<(String, ArticleScores)>, CliError> {
    let p = ctx.require(layout::AGGREGATE, layout::RUN_MEANS, "aggregate")?;
    m.input(&p)?;
    let mut by_model = read_run_means(&p)?;
    let mut out: Vec<(String, ArticleScores)> = ctx
        .config
        .models
        .iter()
        .map(|mc| (mc.id.clone(), by_model.remove(&mc.id).unwrap_or_default()))
        .collect();
    if ctx.model_pair().is_ok() {
        let p = ctx.require(layout::AGGREGATE, layout::COMBINED, "aggregate")?;
        m.input(&p)?;
        out.push((
            COMBINED_ID.into(),
            synthetic::read_scores(&p, COMBINED_ID).map_err(CliError::data)?,
        ));
    }
    Ok(out)
}

/// Model indicators plus `nlcs_<snapshot>` for each configured snapshot.
fn load_all_indicators(ctx: &Ctx, m: &mut ManifestBuilder) -> Result<Vec<(String, ArticleScores)>, CliError> {
    let mut out = load_model_indicators(ctx, m)?;
    if !ctx.config.citations.snapshots.is_empty() {
        let p = ctx.require(layout::NLCS, layout::NLCS_VALUES, "nlcs")?;
        m.input(&p)?;
        let data = read_bytes(&p)?;
        let by_snap = indicators::read_nlcs(&p.display().to_string(), data.as_slice()).map_err(CliError::data)?;
        for (snap, scores) in by_snap {
            out.push((format!("nlcs_{snap}"), scores));
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------ nlcs

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NlcsSummary {
    pub values: usize,
    pub missing: usize,
    pub failures: usize,
}

pub fn nlcs(ctx: &Ctx) -> Result<NlcsSummary, CliError> {
    let snaps = &ctx.config.citations.snapshots;
    if snaps.is_empty() {
        return Err(CliError::Usage("no [citations.snapshots] configured".into()));
    }
    let (corpus, _) = ctx.load_ingested()?;
    let mut m = ctx.manifest("nlcs");
    let mut records = BTreeMap::new();
    for (snap, path) in snaps {
        let path = ctx.resolve(path);
        records.insert(
            snap.clone(),
            indicators::load_citations(&path, snap).map_err(CliError::data)?,
        );
        m.input(&path)?;
    }
    let ids: Vec<&str> = corpus.articles.iter().map(|a| a.article_id.as_str()).collect();
    let batch = indicators::batch_nlcs(&ids, &records);

    let dir = ctx.dir(layout::NLCS)?;
    let p = dir.join(layout::NLCS_VALUES);
    indicators::write_nlcs(&batch, create(&p)?)?;
    m.output(&p)?;
    let p = dir.join(layout::DIAGNOSTICS);
    indicators::write_diagnostics(&batch, create(&p)?)?;
    m.output(&p)?;
    m.param("snapshots", snaps.keys().collect::<Vec<_>>());
    m.write(&dir)?;
    Ok(NlcsSummary {
        values: batch.values.len(),
        missing: batch.missing.len(),
        failures: batch.failures.len(),
    })
}

// ------------------------------------------------------------- correlate

pub fn correlate(ctx: &Ctx) -> Result<Vec<CorrelationResult>, CliError> {
    let (corpus, gold) = ctx.load_ingested()?;
    let mut m = ctx.manifest("correlate");
    m.input(&ctx.out.join(layout::CORPUS).join(layout::GOLD))?;
    let indicators = load_all_indicators(ctx, &mut m)?;
    let boot = ctx.config.analysis.bootstrap();

    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (id, scores) in &indicators {
        let table = analysis::per_uoa_correlations(id, scores, &gold, &corpus, Some(&boot));
        results.extend(table.results);
        skipped.extend(table.skipped.into_iter().map(|s| (id.clone(), s)));
    }
    if let Some(path) = &ctx.config.analysis.theoretical_max {
        let path = ctx.resolve(path);
        let data = read_bytes(&path)?;
        let maxima =
            analysis::read_theoretical_max(&path.display().to_string(), data.as_slice()).map_err(CliError::data)?;
        results = analysis::apply_theoretical_max(&results, &maxima).map_err(CliError::data)?;
        m.input(&path)?;
    }

    let dir = ctx.dir(layout::ANALYSIS)?;
    let p = dir.join(layout::CORRELATIONS);
    analysis::write_correlations(&results, create(&p)?)?;
    m.output(&p)?;

    let p = dir.join(layout::SKIPPED);
    let mut w = tabular::writer(create(&p)?);
    w.write_record(["indicator_id", "uoa", "n", "reason"])?;
    for (id, s) in &skipped {
        w.write_record([id.as_str(), &s.uoa.to_string(), &s.n.to_string(), &s.reason])?;
    }
    w.flush().map_err(|e| CliError::io(&p, e))?;
    m.output(&p)?;

    let p = dir.join(layout::CI_OVERLAP);
    analysis::write_overlaps(&analysis::ci_overlaps(&results), create(&p)?)?;
    m.output(&p)?;

    m.param("indicators", indicators.iter().map(|(id, _)| id).collect::<Vec<_>>())
        .param("bootstrap", &boot)
        .note("bootstrap resample i uses the per-UoA seed derived from the master seed, stream i");
    m.write(&dir)?;
    Ok(results)
}

// ------------------------------------------------------------ year-trend

pub fn year_trend(ctx: &Ctx) -> Result<Vec<analysis::YearCell>, CliError> {
    let (corpus, gold) = ctx.load_ingested()?;
    let mut m = ctx.manifest("year-trend");
    m.input(&ctx.out.join(layout::CORPUS).join(layout::GOLD))?;
    let indicators = load_all_indicators(ctx, &mut m)?;
    let refs: Vec<(String, &ArticleScores)> = indicators.iter().map(|(id, s)| (id.clone(), s)).collect();
    let cells = analysis::per_year_trend(&refs, &gold, &corpus);
    let dir = ctx.dir(layout::TREND)?;
    let p = dir.join(layout::YEAR_TREND);
    analysis::write_year_trend(&cells, create(&p)?)?;
    m.output(&p)?;
    m.write(&dir)?;
    Ok(cells)
}

// ---------------------------------------------------------- mean-summary

pub fn mean_summary(ctx: &Ctx) -> Result<Vec<analysis::MeanRow>, CliError> {
    let (_, gold) = ctx.load_ingested()?;
    let mut m = ctx.manifest("mean-summary");
    m.input(&ctx.out.join(layout::CORPUS).join(layout::GOLD))?;
    let mut sources = vec![("gold".to_owned(), gold)];
    sources.extend(load_model_indicators(ctx, &mut m)?);
    let refs: Vec<(String, &ArticleScores)> = sources.iter().map(|(id, s)| (id.clone(), s)).collect();
    let rows = analysis::mean_score_summary(&refs);
    let dir = ctx.dir(layout::MEANS)?;
    let p = dir.join(layout::MEAN_SUMMARY);
    analysis::write_mean_summary(&rows, create(&p)?)?;
    m.output(&p)?;
    m.note("means are taken over the articles present in every nonempty source");
    m.write(&dir)?;
    Ok(rows)
}

// ------------------------------------------------------------ cost-curve

pub fn cost_curve(ctx: &Ctx) -> Result<costmodel::CostCurve, CliError> {
    let (a, b) = ctx.model_pair()?;
    let (corpus, gold) = ctx.load_ingested()?;
    let (scores_path, scores) = load_scores(ctx)?;
    let models = &ctx.config.models;
    let cfg = CostConfig {
        runs: ctx.config.scoring.repetitions,
        cost_a: ctx.cost_a.unwrap_or(models[0].unit_cost),
        cost_b: ctx.cost_b.unwrap_or(models[1].unit_cost),
        max_runs: ctx.config.cost.max_runs,
    };
    let curve = costmodel::cost_curve(
        &costmodel::run_scores(&scores, a),
        &costmodel::run_scores(&scores, b),
        &gold,
        &corpus,
        &cfg,
    )
    .map_err(CliError::data)?;

    let dir = ctx.dir(layout::COST)?;
    let mut m = ctx.manifest("cost-curve");
    m.input(&scores_path)?
        .input(&ctx.out.join(layout::CORPUS).join(layout::GOLD))?;
    let p = dir.join(layout::COST_CURVE);
    costmodel::write_cost_curve(&curve, create(&p)?)?;
    m.output(&p)?;
    m.param("model_a", a)
        .param("model_b", b)
        .param("config", &cfg)
        .param("short_articles", curve.short_articles.len())
        .param("dropped_articles", curve.dropped_articles.len())
        .note(
            "each (runs_a, runs_b) point averages over all run subsets of those sizes; \
             the mean of runs does not depend on their order, so subsets cover every permutation",
        );
    if curve.points.iter().any(|p| p.fallback) {
        m.note("points flagged `fallback` used an article's available-run mean in place of a missing run");
    }
    m.write(&dir)?;
    Ok(curve)
}

// ---------------------------------------------------------------- report

/// Tables gathered by `report`: (stage dir, file, producing subcommand).
fn report_tables(cfg: &CampaignConfig) -> Vec<(&'static str, &'static str, &'static str)> {
    use layout::*;
    let mut t = vec![
        (CORPUS, GOLD, "ingest"),
        (CORPUS, REMOVED, "ingest"),
        (CORPUS, REJECTS, "ingest"),
        (SCORES, FAILURES, "score"),
        (PARSED, SCORE_STORE, "parse"),
        (PARSED, UNRESOLVED, "parse"),
        (PARSED, EXCLUSIONS, "parse"),
        (AGGREGATE, RUN_MEANS, "aggregate"),
        (AGGREGATE, EXCLUDED, "aggregate"),
    ];
    let pair = cfg.models.len() >= 2;
    if pair {
        t.push((AGGREGATE, COMBINED, "aggregate"));
    }
    if !cfg.citations.snapshots.is_empty() {
        t.push((NLCS, NLCS_VALUES, "nlcs"));
        t.push((NLCS, DIAGNOSTICS, "nlcs"));
    }
    t.extend([
        (ANALYSIS, CORRELATIONS, "correlate"),
        (ANALYSIS, SKIPPED, "correlate"),
        (ANALYSIS, CI_OVERLAP, "correlate"),
        (TREND, YEAR_TREND, "year-trend"),
        (MEANS, MEAN_SUMMARY, "mean-summary"),
    ]);
    if pair {
        t.push((COST, COST_CURVE, "cost-curve"));
    }
    t
}

/// Copies every table into `report/` with the stage manifests alongside.
pub fn report(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let tables = report_tables(&ctx.config);
    let sources = tables
        .iter()
        .map(|(stage, file, producer)| ctx.require(stage, file, producer))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = ctx.dir(layout::REPORT)?;
    let mut m = ctx.manifest("report");
    let mut written = Vec::new();
    let mut stages = BTreeSet::new();
    for ((stage, file, _), src) in tables.iter().zip(&sources) {
        let dst = dir.join(file);
        std::fs::copy(src, &dst).map_err(|e| CliError::io(&dst, e))?;
        m.input(src)?.output(&dst)?;
        written.push(dst);
        stages.insert(*stage);
    }
    let manifests = dir.join("manifests");
    std::fs::create_dir_all(&manifests).map_err(|e| CliError::io(&manifests, e))?;
    for stage in stages {
        let src = ctx.out.join(stage).join(MANIFEST_FILE);
        if src.is_file() {
            let dst = manifests.join(format!("{stage}.json"));
            std::fs::copy(&src, &dst).map_err(|e| CliError::io(&dst, e))?;
            m.output(&dst)?;
        }
    }
    m.prompts(ctx.registry()?.checksums())
        .param("scoring_seed", ctx.config.scoring.seed)
        .param("bootstrap_seed", ctx.config.analysis.bootstrap_seed);
    m.write(&dir)?;
    Ok(written)
}

// -------------------------------------------------------------- pipeline

/// Every stage in order; optional ones run when configured.
pub fn pipeline(ctx: &Ctx) -> Result<(), CliError> {
    let s = ingest(ctx)?;
    log::info!("ingest: {} kept, {} removed, {} rejected", s.kept, s.removed, s.rejects);
    let s = score(ctx)?;
    log::info!(
        "score: {} reports ({} cached), {} failures, cost {}",
        s.reports,
        s.cache_hits,
        s.failures,
        s.total_cost
    );
    let s = parse(ctx)?;
    log::info!(
        "parse: {} scored, {} excluded, {} unresolved",
        s.scored,
        s.excluded,
        s.unresolved
    );
    aggregate(ctx)?;
    if !ctx.config.citations.snapshots.is_empty() {
        nlcs(ctx)?;
    }
    correlate(ctx)?;
    year_trend(ctx)?;
    mean_summary(ctx)?;
    if ctx.model_pair().is_ok() {
        cost_curve(ctx)?;
    }
    report(ctx)?;
    Ok(())
}
