//! `refqual` command-line pipeline.
//!
//! Stages talk to each other through files under the configured output
//! directory; see [`stages::layout`].

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use refqual::synthetic::{self, SyntheticConfig};

use crate::config::{BackendKind, CampaignConfig, LoadedConfig, ModelConfig};
pub use crate::error::CliError;
use crate::stages::Ctx;

#[derive(Debug, Parser)]
#[command(
    name = "refqual",
    version,
    about = "Score research articles with language models and compare against expert proxies"
)]
pub struct Cli {
    /// Campaign config file.
    #[arg(long, short = 'c', global = true, default_value = "refqual.toml")]
    pub config: PathBuf,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override config values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Mock backend seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    #[arg(long, global = true)]
    pub repetitions: Option<u32>,
    /// Bootstrap resamples.
    #[arg(long, global = true)]
    pub resamples: Option<usize>,
    #[arg(long, global = true)]
    pub bootstrap_seed: Option<u64>,
    /// Unit cost of the first model in the cost curve.
    #[arg(long, global = true)]
    pub cost_a: Option<f64>,
    /// Unit cost of the second model in the cost curve.
    #[arg(long, global = true)]
    pub cost_b: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load articles and profiles, drop short abstracts, attach gold scores.
    Ingest,
    /// Print the prompts that would be sent for some articles.
    PromptPreview {
        /// Article ids; the first `--limit` articles when none are given.
        #[arg(long = "article")]
        articles: Vec<String>,
        #[arg(long, default_value_t = 3)]
        limit: usize,
    },
    /// Schedule and submit every (article, model, run) request.
    Score,
    /// Extract scores from the raw reports.
    Parse,
    /// Answer the manual-resolution queue interactively.
    Resolve,
    /// Per-model run means and the two-model combination.
    Aggregate,
    /// Field-year normalised log citation scores per snapshot.
    Nlcs,
    /// Per-UoA Spearman correlations with bootstrap intervals.
    Correlate,
    /// Weighted correlation per publication year.
    YearTrend,
    /// Mean score per source.
    MeanSummary,
    /// Correlation versus cost for every mix of runs from two models.
    CostCurve,
    /// Bundle all tables and manifests into report/.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Write a synthetic corpus and a matching config.
    Synth {
        /// Target directory.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = SyntheticConfig::default().seed)]
        data_seed: u64,
        #[arg(long, default_value_t = SyntheticConfig::default().articles_per_uoa)]
        articles_per_uoa: usize,
    },
}

impl Overrides {
    fn apply(&self, c: &mut CampaignConfig) {
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.backend {
            c.scoring.backend = v;
        }
        if let Some(v) = self.seed {
            c.scoring.seed = v;
        }
        if let Some(v) = self.parallelism {
            c.scoring.parallelism = v;
        }
        if let Some(v) = self.repetitions {
            c.scoring.repetitions = v;
        }
        if let Some(v) = self.resamples {
            c.analysis.bootstrap_resamples = v;
        }
        if let Some(v) = self.bootstrap_seed {
            c.analysis.bootstrap_seed = v;
        }
    }
}

/// Loads the config and applies flag overrides. `--out` is taken relative
/// to the working directory, config paths relative to the config file.
pub fn context(config_path: &Path, overrides: &Overrides) -> Result<Ctx, CliError> {
    let loaded = LoadedConfig::load(config_path)?;
    let mut config = loaded.config.clone();
    overrides.apply(&mut config);
    config.validate()?;
    for (flag, v) in [("--cost-a", overrides.cost_a), ("--cost-b", overrides.cost_b)] {
        if v.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(CliError::Usage(format!("{flag} must be positive")));
        }
    }
    let out = match &overrides.out {
        Some(o) => o.clone(),
        None => loaded.output_dir(),
    };
    Ok(Ctx {
        config,
        base_dir: loaded.base_dir,
        config_sha256: loaded.sha256,
        out,
        cost_a: overrides.cost_a,
        cost_b: overrides.cost_b,
    })
}

/// Config written next to a synthetic corpus.
pub fn synthetic_config() -> CampaignConfig {
    let model = |id: &str, unit_cost: f64, bias: f64, noise_sd: f64| ModelConfig {
        id: id.to_owned(),
        unit_cost,
        params: Default::default(),
        mock: refqual::gateway::MockProfile {
            bias,
            noise_sd,
            ..Default::default()
        },
    };
    let mut c: CampaignConfig =
        toml::from_str("output_dir = \"out\"\n[corpus]\narticles = \"articles.csv\"\nprofiles = \"profiles.csv\"\n")
            .expect("static config parses");
    c.scoring.latent = Some(synthetic::files::LATENT.into());
    c.models = vec![
        model("mock-large", 10.0, 0.35, 0.55),
        model("mock-mini", 1.0, 0.1, 0.65),
    ];
    c.citations.snapshots = synthetic::SNAPSHOTS
        .iter()
        .map(|(s, _)| (s.to_string(), PathBuf::from(synthetic::files::citations(s))))
        .collect();
    c.analysis.theoretical_max = Some(synthetic::files::THEORETICAL_MAX.into());
    c
}

pub fn synth(dir: &Path, cfg: &SyntheticConfig) -> Result<(), CliError> {
    let data = synthetic::generate(cfg).map_err(CliError::data)?;
    synthetic::write_dir(&data, dir).map_err(|e| CliError::io(dir, e))?;
    let text = toml::to_string_pretty(&synthetic_config()).expect("config serialises");
    let p = dir.join("config.toml");
    std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    let p = dir.join("synthetic.toml");
    let text = toml::to_string_pretty(cfg).expect("config serialises");
    std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
}

pub fn execute(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    if let Command::Synth {
        dir,
        data_seed,
        articles_per_uoa,
    } = &cli.command
    {
        let cfg = SyntheticConfig {
            seed: *data_seed,
            articles_per_uoa: *articles_per_uoa,
            ..SyntheticConfig::default()
        };
        return synth(dir, &cfg);
    }
    let ctx = context(&cli.config, &cli.overrides)?;
    let say =
        |out: &mut dyn Write, msg: String| writeln!(out, "{msg}").map_err(|e| CliError::Data(format!("stdout: {e}")));
    match &cli.command {
        Command::Ingest => {
            let s = stages::ingest(&ctx)?;
            say(
                out,
                format!(
                    "ingest: {} loaded, {} kept, {} short abstracts removed, {} rejected",
                    s.loaded, s.kept, s.removed, s.rejects
                ),
            )
        }
        Command::PromptPreview { articles, limit } => stages::prompt_preview(&ctx, articles, *limit, out),
        Command::Score => {
            let s = stages::score(&ctx)?;
            say(
                out,
                format!(
                    "score [{}]: {} requests, {} reports ({} cached), {} failures, cost {}",
                    s.backend, s.requests, s.reports, s.cache_hits, s.failures, s.total_cost
                ),
            )
        }
        Command::Parse => {
            let s = stages::parse(&ctx)?;
            say(
                out,
                format!(
                    "parse: {} scored, {} excluded, {} unresolved",
                    s.scored, s.excluded, s.unresolved
                ),
            )
        }
        Command::Resolve => stages::resolve(&ctx, input, out).map(drop),
        Command::Aggregate => {
            let s = stages::aggregate(&ctx)?;
            let per: Vec<String> = s.per_model.iter().map(|(k, v)| format!("{k} {v}")).collect();
            say(out, format!("aggregate: {}; combined {:?}", per.join(", "), s.combined))
        }
        Command::Nlcs => {
            let s = stages::nlcs(&ctx)?;
            say(
                out,
                format!(
                    "nlcs: {} values, {} missing, {} failures",
                    s.values, s.missing, s.failures
                ),
            )
        }
        Command::Correlate => {
            let r = stages::correlate(&ctx)?;
            say(out, format!("correlate: {} rows", r.len()))
        }
        Command::YearTrend => {
            let r = stages::year_trend(&ctx)?;
            say(out, format!("year-trend: {} cells", r.len()))
        }
        Command::MeanSummary => {
            for r in stages::mean_summary(&ctx)? {
                say(out, format!("{}\t{}\t{:.4}", r.source, r.n, r.mean))?;
            }
            Ok(())
        }
        Command::CostCurve => {
            let c = stages::cost_curve(&ctx)?;
            say(out, format!("cost-curve: {} points", c.points.len()))
        }
        Command::Report => {
            let files = stages::report(&ctx)?;
            say(
                out,
                format!(
                    "report: {} tables in {}",
                    files.len(),
                    ctx.out.join(stages::layout::REPORT).display()
                ),
            )
        }
        Command::Pipeline => {
            stages::pipeline(&ctx)?;
            say(
                out,
                format!("pipeline complete: {}", ctx.out.join(stages::layout::REPORT).display()),
            )
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli, input, out) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_1_help_exits_0() {
        let mut sink = Vec::new();
        let mut empty: &[u8] = b"";
        assert_eq!(run(["refqual", "--help"], &mut empty, &mut sink), 0);
        assert_eq!(run(["refqual", "no-such-command"], &mut empty, &mut sink), 1);
        assert_eq!(
            run(
                ["refqual", "score", "--backend", "carrier-pigeon"],
                &mut empty,
                &mut sink
            ),
            1
        );
        assert_eq!(
            run(
                ["refqual", "-c", "/nonexistent/x.toml", "ingest"],
                &mut empty,
                &mut sink
            ),
            1
        );
    }

    #[test]
    fn synthetic_config_round_trips() {
        let c = synthetic_config();
        let text = toml::to_string_pretty(&c).unwrap();
        let back: CampaignConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }
}
