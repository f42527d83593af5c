//! Deterministic offline backend and a fault-injecting wrapper.
//!
//! The mock answers with narrative reports whose star values are drawn
//! around a per-article latent quality. The draw is a pure function of
//! (seed, article, model, run), so a campaign is reproducible whatever the
//! request order or thread count.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, RunKey, ScoreRequest, ScoringBackend};
use crate::checksum::{sha256_concat, sha256_hex};

/// Behaviour of one simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockProfile {
    /// Added to the latent quality before noise.
    pub bias: f64,
    /// Standard deviation of the per-run noise.
    pub noise_sd: f64,
    /// Share of runs reported on the half-star grid.
    pub half_star_rate: f64,
    /// Share of runs that decline to give any score.
    pub no_score_rate: f64,
    /// Share of scored runs that give only the three dimensions.
    pub dimensions_only_rate: f64,
    /// Share of scored runs that give only an overall score.
    pub overall_only_rate: f64,
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            bias: 0.0,
            noise_sd: 0.6,
            half_star_rate: 0.05,
            no_score_rate: 0.01,
            dimensions_only_rate: 0.2,
            overall_only_rate: 0.3,
        }
    }
}

fn run_rng(seed: u64, key: &RunKey) -> ChaCha8Rng {
    let digest = sha256_concat(&[
        &seed.to_le_bytes(),
        key.article_id.as_bytes(),
        b"\x1f",
        key.model_id.as_bytes(),
        b"\x1f",
        &key.run_index.to_le_bytes(),
    ]);
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex is 32 bytes");
    ChaCha8Rng::from_seed(bytes)
}

fn fmt_star(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}*")
    } else {
        format!("{v:.1}*")
    }
}

/// Mean-preserving dimension offsets.
const PATTERNS: [[f64; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [1.0, -1.0, 0.0],
    [0.0, 1.0, -1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 1.0, 0.0],
];

/// The report one simulated run would return. `latent` is the article's
/// underlying quality on the star scale.
pub fn mock_generate(seed: u64, latent: f64, key: &RunKey, profile: &MockProfile) -> String {
    let mut rng = run_rng(seed, key);
    if rng.random::<f64>() < profile.no_score_rate {
        return "The abstract does not contain enough information about the methods or findings \
                for me to judge originality, significance or rigour, so I cannot assign a score."
            .to_owned();
    }
    let noise = Normal::new(0.0, profile.noise_sd.max(0.0))
        .map(|n| n.sample(&mut rng))
        .unwrap_or(0.0);
    let q = latent + profile.bias + noise;
    let half = rng.random::<f64>() < profile.half_star_rate;
    let star = if half {
        ((q * 2.0).round() / 2.0).clamp(1.0, 4.0)
    } else {
        q.round().clamp(1.0, 4.0)
    };
    let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
    let dims: Vec<f64> = if pattern.iter().all(|o| (1.0..=4.0).contains(&(star + o))) {
        pattern.iter().map(|o| star + o).collect()
    } else {
        vec![star; 3]
    };
    let shape = rng.random::<f64>();
    let dims_block = format!(
        "Originality: {}\nThe work extends existing approaches in a recognisable direction.\n\n\
         Significance: {}\nThe findings are likely to interest researchers in the field.\n\n\
         Rigour: {}\nThe methods are described in reasonable detail.",
        fmt_star(dims[0]),
        fmt_star(dims[1]),
        fmt_star(dims[2])
    );
    if shape < profile.dimensions_only_rate {
        dims_block
    } else if shape < profile.dimensions_only_rate + profile.overall_only_rate {
        format!(
            "This article addresses a relevant question and reports clear results.\n\n\
             Overall score: {}",
            fmt_star(star)
        )
    } else {
        format!("{dims_block}\n\nOverall: {}", fmt_star(star))
    }
}

/// Offline backend keyed on per-article latent quality.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    latent: HashMap<String, f64>,
    default_profile: MockProfile,
    profiles: BTreeMap<String, MockProfile>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64, latent: HashMap<String, f64>) -> Self {
        Self {
            seed,
            latent,
            default_profile: MockProfile::default(),
            profiles: BTreeMap::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_profile(mut self, model_id: impl Into<String>, profile: MockProfile) -> Self {
        self.profiles.insert(model_id.into(), profile);
        self
    }

    pub fn with_default_profile(mut self, profile: MockProfile) -> Self {
        self.default_profile = profile;
        self
    }

    /// Backend calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn profile(&self, model_id: &str) -> &MockProfile {
        self.profiles.get(model_id).unwrap_or(&self.default_profile)
    }
}

impl ScoringBackend for MockBackend {
    fn tag(&self) -> String {
        let mut latent: Vec<_> = self.latent.iter().collect();
        latent.sort_by(|a, b| a.0.cmp(b.0));
        let state = serde_json::json!({
            "default": self.default_profile,
            "profiles": self.profiles,
            "latent": latent,
        });
        let digest = sha256_hex(state.to_string().as_bytes());
        format!("mock-s{}-{}", self.seed, &digest[..12])
    }

    fn send(
        &self,
        request: &ScoreRequest,
        _params: &BTreeMap<String, serde_json::Value>,
    ) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let latent = *self
            .latent
            .get(&request.key.article_id)
            .ok_or_else(|| BackendError::Permanent(format!("no latent quality for `{}`", request.key.article_id)))?;
        let text = mock_generate(self.seed, latent, &request.key, self.profile(&request.key.model_id));
        let mut meta = BTreeMap::new();
        meta.insert("backend".to_owned(), "mock".to_owned());
        Ok(BackendReply { text, meta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Fail transiently this many times, then pass through.
    Transient(u32),
    Permanent,
    Fatal,
}

/// Wraps a backend and fails chosen requests.
pub struct FaultInjector<B> {
    inner: B,
    faults: Mutex<HashMap<RunKey, Fault>>,
}

impl<B: ScoringBackend> FaultInjector<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            faults: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_fault(self, key: RunKey, fault: Fault) -> Self {
        self.faults.lock().expect("fault lock").insert(key, fault);
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ScoringBackend> ScoringBackend for FaultInjector<B> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn send(
        &self,
        request: &ScoreRequest,
        params: &BTreeMap<String, serde_json::Value>,
    ) -> Result<BackendReply, BackendError> {
        {
            let mut faults = self.faults.lock().expect("fault lock");
            match faults.get_mut(&request.key) {
                Some(Fault::Transient(n)) if *n > 0 => {
                    *n -= 1;
                    return Err(BackendError::Transient("injected: 429 Too Many Requests".into()));
                }
                Some(Fault::Permanent) => return Err(BackendError::Permanent("injected: 400 Bad Request".into())),
                Some(Fault::Fatal) => return Err(BackendError::Fatal("injected: 401 Unauthorized".into())),
                _ => {}
            }
        }
        self.inner.send(request, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report_parser::extract_scores;

    fn key(a: &str, run: u32) -> RunKey {
        RunKey {
            article_id: a.into(),
            model_id: "m".into(),
            run_index: run,
        }
    }

    #[test]
    fn deterministic_per_run() {
        let p = MockProfile::default();
        assert_eq!(
            mock_generate(1, 2.5, &key("a", 1), &p),
            mock_generate(1, 2.5, &key("a", 1), &p)
        );
        let distinct: std::collections::BTreeSet<_> =
            (1..=20).map(|r| mock_generate(1, 2.5, &key("a", r), &p)).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn reports_parse_and_track_latent() {
        let p = MockProfile {
            no_score_rate: 0.0,
            ..MockProfile::default()
        };
        for latent in [1.0, 2.0, 3.0, 4.0] {
            let mut sum = 0.0;
            for r in 1..=200 {
                let text = mock_generate(7, latent, &key("x", r), &p);
                let (v, _) = extract_scores(&text).resolve().expect("mock reports always parse");
                assert!((1.0..=4.0).contains(&v));
                sum += v;
            }
            let mean = sum / 200.0;
            assert!((mean - latent).abs() < 0.6, "latent {latent} mean {mean}");
        }
    }

    #[test]
    fn no_score_rate_one_never_scores() {
        let p = MockProfile {
            no_score_rate: 1.0,
            ..MockProfile::default()
        };
        let text = mock_generate(1, 3.0, &key("a", 1), &p);
        assert!(extract_scores(&text).resolve().is_none());
    }

    #[test]
    fn tag_tracks_configuration() {
        let latent: HashMap<String, f64> = [("a".to_owned(), 2.0)].into();
        let a = MockBackend::new(1, latent.clone()).tag();
        assert_eq!(a, MockBackend::new(1, latent.clone()).tag());
        assert_ne!(a, MockBackend::new(2, latent.clone()).tag());
        let biased = MockProfile {
            bias: 0.5,
            ..MockProfile::default()
        };
        assert_ne!(a, MockBackend::new(1, latent).with_profile("m", biased).tag());
    }
}
