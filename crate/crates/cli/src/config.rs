//! Campaign configuration (TOML). Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use refqual::analysis::BootstrapConfig;
use refqual::corpus::LengthMetric;
use refqual::gateway::{MockProfile, ModelSpec, DEFAULT_REPETITIONS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub articles: PathBuf,
    pub profiles: PathBuf,
    #[serde(default = "default_fraction")]
    pub filter_fraction: f64,
    #[serde(default)]
    pub length_metric: LengthMetric,
}

fn default_fraction() -> f64 {
    0.10
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Directory with the four system prompts and a MANIFEST; the bundled
    /// prompts are used when unset.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub unit_cost: f64,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    /// Simulated behaviour under the mock backend.
    #[serde(default)]
    pub mock: MockProfile,
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            model_id: self.id.clone(),
            unit_cost: self.unit_cost,
            params: self.params.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub backend: BackendKind,
    pub repetitions: u32,
    pub parallelism: usize,
    pub max_retries: u32,
    pub cache_dir: PathBuf,
    /// Mock backend seed.
    pub seed: u64,
    /// Per-article latent quality for the mock backend (`article_id,latent`).
    /// Gold scores stand in when unset.
    pub latent: Option<PathBuf>,
    pub endpoint: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            repetitions: DEFAULT_REPETITIONS,
            parallelism: 8,
            max_retries: 4,
            cache_dir: PathBuf::from("cache"),
            seed: 7,
            latent: None,
            endpoint: "https://api.openai.com/v1/chat/completions".to_owned(),
            api_key_env: "REFQUAL_API_KEY".to_owned(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitationConfig {
    /// Snapshot label → citations file.
    #[serde(default)]
    pub snapshots: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub theoretical_max: Option<PathBuf>,
    pub bootstrap_level: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub redraw_budget: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let b = BootstrapConfig::default();
        Self {
            theoretical_max: None,
            bootstrap_level: b.level,
            bootstrap_resamples: b.resamples,
            bootstrap_seed: 20_210_101,
            redraw_budget: b.redraw_budget,
        }
    }
}

impl AnalysisConfig {
    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            level: self.bootstrap_level,
            resamples: self.bootstrap_resamples,
            seed: self.bootstrap_seed,
            redraw_budget: self.redraw_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSettings {
    pub max_runs: u32,
}

impl Default for CostSettings {
    fn default() -> Self {
        Self {
            max_runs: refqual::costmodel::DEFAULT_MAX_RUNS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub citations: CitationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub cost: CostSettings,
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: CampaignConfig,
    pub base_dir: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: CampaignConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            sha256: refqual::checksum::sha256_hex(text.as_bytes()),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(0.0..1.0).contains(&self.corpus.filter_fraction) {
            return bad(format!(
                "corpus.filter_fraction {} is outside [0, 1)",
                self.corpus.filter_fraction
            ));
        }
        if self.scoring.repetitions == 0 {
            return bad("scoring.repetitions must be at least 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(&m.id) {
                return bad(format!("model `{}` is listed twice", m.id));
            }
            if !(m.unit_cost.is_finite() && m.unit_cost > 0.0) {
                return bad(format!("model `{}`: unit_cost must be positive", m.id));
            }
        }
        let a = &self.analysis;
        if !(a.bootstrap_level > 0.0 && a.bootstrap_level < 1.0) {
            return bad(format!(
                "analysis.bootstrap_level {} is outside (0, 1)",
                a.bootstrap_level
            ));
        }
        if a.bootstrap_resamples == 0 {
            return bad("analysis.bootstrap_resamples must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[corpus]
articles = "a.csv"
profiles = "p.csv"
"#;

    #[test]
    fn defaults_follow_campaign_choices() {
        let c: CampaignConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(c.corpus.filter_fraction, 0.10);
        assert_eq!(c.scoring.repetitions, 5);
        assert_eq!(c.analysis.bootstrap_level, 0.95);
        assert_eq!(c.analysis.bootstrap_resamples, 1000);
        assert_eq!(c.cost.max_runs, 12);
        c.validate().unwrap();
    }

    #[test]
    fn models_and_snapshots() {
        let text = format!(
            "{MINIMAL}\n[[models]]\nid = \"big\"\nunit_cost = 10\n[models.mock]\nbias = 0.4\n\
             [[models]]\nid = \"small\"\nunit_cost = 1\n[citations.snapshots]\n2021 = \"c21.csv\"\n"
        );
        let c: CampaignConfig = toml::from_str(&text).unwrap();
        assert_eq!(c.models[0].mock.bias, 0.4);
        assert_eq!(c.models[1].mock, MockProfile::default());
        assert_eq!(c.citations.snapshots["2021"], PathBuf::from("c21.csv"));
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let bad = format!("{MINIMAL}\n[scoring]\nrepetitions = 0\n");
        assert!(toml::from_str::<CampaignConfig>(&bad).unwrap().validate().is_err());
        let typo = format!("{MINIMAL}\n[scoring]\nrepetitons = 3\n");
        assert!(toml::from_str::<CampaignConfig>(&typo).is_err());
        let dup = format!("{MINIMAL}\n[[models]]\nid = \"m\"\nunit_cost = 1\n[[models]]\nid = \"m\"\nunit_cost = 2\n");
        assert!(toml::from_str::<CampaignConfig>(&dup).unwrap().validate().is_err());
    }
}
