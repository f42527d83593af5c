//! Scoring-backend gateway: run scheduling, concurrent submission with
//! retries, the append-only report cache and the run ledger.
//!
//! Results never depend on completion order: reports, failures and ledger
//! entries are returned in request order whatever the worker interleaving.

mod cache;
mod ledger;
mod live;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{CacheEntry, CacheError, ScoreCache, CACHE_FORMAT};
pub use ledger::{LedgerEntry, Outcome, RunLedger};
pub use live::LiveBackend;
pub use mock::{mock_generate, Fault, FaultInjector, MockBackend, MockProfile};

use crate::checksum::sha256_concat;
use crate::prompts::PromptPair;

/// Nominal repetitions per article and model.
pub const DEFAULT_REPETITIONS: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("repetitions must be at least 1")]
    InvalidRepetitions,
    #[error("model `{0}`: unit cost must be positive")]
    InvalidCost(String),
    #[error("model `{0}` is not part of the campaign")]
    UnknownModel(String),
    #[error("backend configuration error: {0}")]
    Fatal(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Identity of one scoring run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub article_id: String,
    pub model_id: String,
    pub run_index: u32,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/run{}", self.article_id, self.model_id, self.run_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    /// Relative price of one request.
    pub unit_cost: f64,
    /// Generation settings forwarded to the backend; empty means backend
    /// defaults.
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl ModelSpec {
    pub fn new(model_id: impl Into<String>, unit_cost: f64) -> Result<Self, GatewayError> {
        let spec = Self {
            model_id: model_id.into(),
            unit_cost,
            params: BTreeMap::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.unit_cost.is_finite() && self.unit_cost > 0.0 {
            Ok(())
        } else {
            Err(GatewayError::InvalidCost(self.model_id.clone()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub key: RunKey,
    pub prompt: PromptPair,
}

impl ScoreRequest {
    /// SHA-256 of the system text followed by the user text.
    pub fn prompt_sha256(&self) -> String {
        sha256_concat(&[self.prompt.system_text.as_bytes(), self.prompt.user_text.as_bytes()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReport {
    pub key: RunKey,
    pub report_text: String,
    /// RFC 3339 timestamp (UTC) of receipt from the backend.
    pub received_at: String,
    #[serde(default)]
    pub backend_meta: BTreeMap<String, String>,
}

/// A prompt ready to be scheduled for one article.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArticlePrompt {
    pub article_id: String,
    pub prompt: PromptPair,
}

/// Round-robin passes over the corpus: pass r holds run r of every article,
/// so repetitions of the same article are as far apart as possible.
pub fn schedule_runs(
    articles: &[ArticlePrompt],
    model: &ModelSpec,
    repetitions: u32,
) -> Result<Vec<ScoreRequest>, GatewayError> {
    schedule_campaign(articles, std::slice::from_ref(model), repetitions)
}

/// Like [`schedule_runs`] for several models; within each pass the models
/// follow one another.
pub fn schedule_campaign(
    articles: &[ArticlePrompt],
    models: &[ModelSpec],
    repetitions: u32,
) -> Result<Vec<ScoreRequest>, GatewayError> {
    if repetitions == 0 {
        return Err(GatewayError::InvalidRepetitions);
    }
    let mut out = Vec::with_capacity(articles.len() * models.len() * repetitions as usize);
    for run_index in 1..=repetitions {
        for model in models {
            for a in articles {
                out.push(ScoreRequest {
                    key: RunKey {
                        article_id: a.article_id.clone(),
                        model_id: model.model_id.clone(),
                        run_index,
                    },
                    prompt: a.prompt.clone(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BackendReply {
    pub text: String,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying (rate limit, timeout, server error).
    #[error("transient: {0}")]
    Transient(String),
    /// This request will not succeed; the campaign continues.
    #[error("permanent: {0}")]
    Permanent(String),
    /// Authentication or configuration problem; the campaign stops.
    #[error("fatal: {0}")]
    Fatal(String),
}

/// Adapter contract: (system text, user text, params) → report text.
pub trait ScoringBackend: Send + Sync {
    /// Cache namespace. Backends that can answer the same prompt differently
    /// must use different tags.
    fn tag(&self) -> String;

    fn send(
        &self,
        request: &ScoreRequest,
        params: &BTreeMap<String, serde_json::Value>,
    ) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based): base·2^(retry−1), capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOptions {
    /// Maximum simultaneous in-flight requests.
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for SubmitOptions {
    fn default() -> Self {
        Self {
            parallelism: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub key: RunKey,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOutcome {
    /// Successful reports in request order.
    pub reports: Vec<RawReport>,
    pub failures: Vec<RequestFailure>,
    pub ledger: RunLedger,
}

enum RequestResult {
    Report(RawReport),
    Failed(RequestFailure),
}

fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = secs / 86_400;
    let rem = secs % 86_400;
    // Civil-from-days (proleptic Gregorian), Howard Hinnant's algorithm.
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

type Slot = Mutex<Option<(RequestResult, Vec<LedgerEntry>)>>;

/// Sends every request that the cache cannot answer.
///
/// Cache hits cost nothing and never reach the backend. Misses run on up to
/// `parallelism` worker threads with exponential backoff on transient
/// errors; every success is written to the cache before it is returned. A
/// request that exhausts its retries or fails permanently becomes a
/// [`RequestFailure`] and the campaign goes on. A fatal backend error stops
/// the campaign.
pub fn submit(
    requests: &[ScoreRequest],
    models: &[ModelSpec],
    backend: &dyn ScoringBackend,
    cache: &ScoreCache,
    options: &SubmitOptions,
) -> Result<SubmitOutcome, GatewayError> {
    let specs: BTreeMap<&str, &ModelSpec> = models.iter().map(|m| (m.model_id.as_str(), m)).collect();
    for r in requests {
        if !specs.contains_key(r.key.model_id.as_str()) {
            return Err(GatewayError::UnknownModel(r.key.model_id.clone()));
        }
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let fatal: Mutex<Option<String>> = Mutex::new(None);
    let slots: Vec<Slot> = requests.iter().map(|_| Mutex::new(None)).collect();
    let workers = options.parallelism.clamp(1, requests.len().max(1));

    let worker = || {
        while !abort.load(Ordering::Relaxed) {
            let idx = next.fetch_add(1, Ordering::Relaxed);
            let Some(request) = requests.get(idx) else {
                break;
            };
            let spec = specs[request.key.model_id.as_str()];
            match run_one(idx, request, spec, backend, cache, &options.retry) {
                Ok(done) => *slots[idx].lock().expect("slot lock") = Some(done),
                Err(message) => {
                    abort.store(true, Ordering::Relaxed);
                    fatal.lock().expect("fatal lock").get_or_insert(message);
                }
            }
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(worker);
        }
    });

    if let Some(message) = fatal.into_inner().expect("fatal lock") {
        return Err(GatewayError::Fatal(message));
    }
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut ledger = RunLedger::default();
    for slot in slots {
        let (result, entries) = slot.into_inner().expect("slot lock").expect("every request processed");
        ledger.entries.extend(entries);
        match result {
            RequestResult::Report(r) => reports.push(r),
            RequestResult::Failed(f) => failures.push(f),
        }
    }
    Ok(SubmitOutcome {
        reports,
        failures,
        ledger,
    })
}

fn run_one(
    seq: usize,
    request: &ScoreRequest,
    spec: &ModelSpec,
    backend: &dyn ScoringBackend,
    cache: &ScoreCache,
    retry: &RetryPolicy,
) -> Result<(RequestResult, Vec<LedgerEntry>), String> {
    let prompt_sha = request.prompt_sha256();
    let entry = |attempt: u32, outcome: Outcome, cost: f64, detail: String| LedgerEntry {
        seq,
        article_id: request.key.article_id.clone(),
        model_id: request.key.model_id.clone(),
        run_index: request.key.run_index,
        prompt_sha256: prompt_sha.clone(),
        attempt,
        outcome,
        cost,
        detail,
    };

    if let Some(hit) = cache.get(&request.key.model_id, &prompt_sha, request.key.run_index) {
        let report = RawReport {
            key: request.key.clone(),
            report_text: hit.report_text,
            received_at: hit.received_at,
            backend_meta: hit.backend_meta,
        };
        return Ok((
            RequestResult::Report(report),
            vec![entry(0, Outcome::CacheHit, 0.0, String::new())],
        ));
    }

    let mut entries = Vec::new();
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let result = backend.send(request, &spec.params).and_then(|reply| {
            if reply.text.trim().is_empty() {
                Err(BackendError::Permanent("empty report".to_owned()))
            } else {
                Ok(reply)
            }
        });
        match result {
            Ok(reply) => {
                let report = RawReport {
                    key: request.key.clone(),
                    report_text: reply.text,
                    received_at: now_rfc3339(),
                    backend_meta: reply.meta,
                };
                cache
                    .put(&report, &prompt_sha)
                    .map_err(|e| format!("cache write failed: {e}"))?;
                entries.push(entry(attempt, Outcome::Success, spec.unit_cost, String::new()));
                return Ok((RequestResult::Report(report), entries));
            }
            Err(BackendError::Fatal(message)) => return Err(message),
            Err(BackendError::Transient(message)) if attempt <= retry.max_retries => {
                entries.push(entry(attempt, Outcome::TransientFailure, 0.0, message));
                std::thread::sleep(retry.delay(attempt));
            }
            Err(err) => {
                let (outcome, reason) = match err {
                    BackendError::Transient(m) => (Outcome::RetryExhausted, m),
                    BackendError::Permanent(m) | BackendError::Fatal(m) => (Outcome::PermanentFailure, m),
                };
                entries.push(entry(attempt, outcome, 0.0, reason.clone()));
                let failure = RequestFailure {
                    key: request.key.clone(),
                    reason,
                    attempts: attempt,
                };
                return Ok((RequestResult::Failed(failure), entries));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report_parser::{parse_report, ParseOutcome};
    use std::collections::HashMap;

    fn prompts(n: usize) -> Vec<ArticlePrompt> {
        (1..=n)
            .map(|i| ArticlePrompt {
                article_id: format!("a{i}"),
                prompt: PromptPair {
                    system_text: "sys".into(),
                    user_text: format!("Score this article:\nT{i}\nAbstract\nA{i}"),
                },
            })
            .collect()
    }

    fn latent(n: usize) -> HashMap<String, f64> {
        (1..=n).map(|i| (format!("a{i}"), 1.0 + (i % 4) as f64)).collect()
    }

    fn order(reqs: &[ScoreRequest]) -> Vec<String> {
        reqs.iter()
            .map(|r| format!("{}r{}", r.key.article_id, r.key.run_index))
            .collect()
    }

    #[test]
    fn round_robin_schedule() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(3), &model, 2).unwrap();
        assert_eq!(order(&reqs), ["a1r1", "a2r1", "a3r1", "a1r2", "a2r2", "a3r2"]);
        let single = schedule_runs(&prompts(1), &model, 5).unwrap();
        assert_eq!(order(&single), ["a1r1", "a1r2", "a1r3", "a1r4", "a1r5"]);
        assert!(matches!(
            schedule_runs(&prompts(3), &model, 0),
            Err(GatewayError::InvalidRepetitions)
        ));
    }

    #[test]
    fn model_cost_must_be_positive() {
        assert!(ModelSpec::new("m", 0.0).is_err());
        assert!(ModelSpec::new("m", f64::NAN).is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
    }

    fn options() -> SubmitOptions {
        SubmitOptions {
            parallelism: 4,
            retry: RetryPolicy::immediate(2),
        }
    }

    #[test]
    fn second_campaign_served_from_cache() {
        let model = ModelSpec::new("m", 10.0).unwrap();
        let reqs = schedule_runs(&prompts(6), &model, 3).unwrap();
        let backend = MockBackend::new(9, latent(6));
        let cache = ScoreCache::in_memory();
        let first = submit(&reqs, std::slice::from_ref(&model), &backend, &cache, &options()).unwrap();
        assert_eq!(first.reports.len(), 18);
        assert_eq!(backend.calls(), 18);
        assert_eq!(first.ledger.total_cost(), 180.0);

        let second = submit(&reqs, &[model], &backend, &cache, &options()).unwrap();
        assert_eq!(backend.calls(), 18, "no backend call on a warm cache");
        assert_eq!(second.ledger.total_cost(), 0.0);
        let texts = |o: &SubmitOutcome| o.reports.iter().map(|r| r.report_text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&first), texts(&second));
        assert!(second.ledger.entries.iter().all(|e| e.outcome == Outcome::CacheHit));
        assert_eq!(second.ledger.replay(&cache), second.reports);
    }

    #[test]
    fn transient_failure_retried() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(2), &model, 1).unwrap();
        let backend =
            FaultInjector::new(MockBackend::new(1, latent(2))).with_fault(reqs[0].key.clone(), Fault::Transient(1));
        let cache = ScoreCache::in_memory();
        let out = submit(&reqs, &[model], &backend, &cache, &options()).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert!(out.failures.is_empty());
        assert_eq!(out.ledger.retries(), 1);
        let first: Vec<_> = out.ledger.entries.iter().filter(|e| e.seq == 0).collect();
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].outcome, Outcome::TransientFailure);
        assert_eq!(first[1].outcome, Outcome::Success);
        assert_eq!(out.ledger.total_cost(), 2.0);
    }

    #[test]
    fn permanent_failure_degrades_to_fewer_runs() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(3), &model, 5).unwrap();
        let bad = RunKey {
            article_id: "a2".into(),
            model_id: "m".into(),
            run_index: 3,
        };
        let exhausted = RunKey {
            run_index: 4,
            ..bad.clone()
        };
        let backend = FaultInjector::new(MockBackend::new(3, latent(3)).with_profile(
            "m",
            MockProfile {
                no_score_rate: 0.0,
                ..MockProfile::default()
            },
        ))
        .with_fault(bad.clone(), Fault::Permanent)
        .with_fault(exhausted.clone(), Fault::Transient(100));
        let cache = ScoreCache::in_memory();
        let out = submit(&reqs, &[model], &backend, &cache, &options()).unwrap();
        assert_eq!(out.reports.len(), 13);
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.failures[0].key, bad);
        assert_eq!(out.failures[1].attempts, 3);
        assert!(out.ledger.entries.iter().any(|e| e.outcome == Outcome::RetryExhausted));

        let parsed: Vec<_> = out
            .reports
            .iter()
            .filter_map(|r| match parse_report(r) {
                ParseOutcome::Parsed(p) => Some(p),
                ParseOutcome::Unresolved(_) => None,
            })
            .collect();
        let means = crate::report_parser::average_runs(&parsed, 5, &[]);
        let a2 = means["m"].means["a2"];
        assert_eq!(a2.runs, 3);
        assert!(a2.short);
    }

    #[test]
    fn fatal_error_stops_campaign() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(4), &model, 2).unwrap();
        let backend = FaultInjector::new(MockBackend::new(1, latent(4))).with_fault(reqs[1].key.clone(), Fault::Fatal);
        let cache = ScoreCache::in_memory();
        let err = submit(&reqs, &[model], &backend, &cache, &options()).unwrap_err();
        assert!(matches!(err, GatewayError::Fatal(_)));
    }

    #[test]
    fn unknown_model_rejected() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(1), &model, 1).unwrap();
        let other = ModelSpec::new("other", 1.0).unwrap();
        let cache = ScoreCache::in_memory();
        let backend = MockBackend::new(1, latent(1));
        assert!(matches!(
            submit(&reqs, &[other], &backend, &cache, &options()),
            Err(GatewayError::UnknownModel(_))
        ));
    }

    #[test]
    fn results_independent_of_parallelism() {
        let model = ModelSpec::new("m", 1.0).unwrap();
        let reqs = schedule_runs(&prompts(20), &model, 3).unwrap();
        let backend = MockBackend::new(5, latent(20));
        let run = |p: usize| {
            let cache = ScoreCache::in_memory();
            let opts = SubmitOptions {
                parallelism: p,
                ..options()
            };
            let out = submit(&reqs, std::slice::from_ref(&model), &backend, &cache, &opts).unwrap();
            (
                out.reports
                    .into_iter()
                    .map(|r| (r.key, r.report_text))
                    .collect::<Vec<_>>(),
                out.ledger.entries,
            )
        };
        assert_eq!(run(1), run(7));
    }

    #[test]
    fn timestamp_shape() {
        let t = now_rfc3339();
        assert_eq!(t.len(), 20);
        assert!(t.ends_with('Z'));
        assert_eq!(&t[4..5], "-");
    }
}
