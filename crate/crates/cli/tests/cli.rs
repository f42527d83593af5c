use std::path::{Path, PathBuf};

use refqual::synthetic::SyntheticConfig;
use refqual_cli::stages::layout;

fn small_campaign() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        articles_per_uoa: 60,
        departments_per_uoa: 6,
        ..SyntheticConfig::default()
    };
    refqual_cli::synth(dir.path(), &cfg).unwrap();
    let config = dir.path().join("config.toml");
    (dir, config)
}

fn refqual(config: &Path, args: &[&str]) -> (i32, String) {
    refqual_stdin(config, args, "")
}

fn refqual_stdin(config: &Path, args: &[&str], stdin: &str) -> (i32, String) {
    let mut argv = vec!["refqual", "-c", config.to_str().unwrap(), "--resamples", "200"];
    argv.extend_from_slice(args);
    let mut input = stdin.as_bytes();
    let mut out = Vec::new();
    let code = refqual_cli::run(argv, &mut input, &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn ingest_writes_filtered_corpus_and_removal_report() {
    let (dir, config) = small_campaign();
    let (code, msg) = refqual(&config, &["ingest"]);
    assert_eq!(code, 0, "{msg}");
    let corpus = dir.path().join("out").join(layout::CORPUS);
    for f in [
        layout::ARTICLES,
        layout::PROFILES,
        layout::GOLD,
        layout::REMOVED,
        layout::REJECTS,
        "MANIFEST.json",
    ] {
        assert!(corpus.join(f).is_file(), "{f} missing");
    }
    // 4 UoAs of 60 articles, 6 removed from each.
    let removed = std::fs::read_to_string(corpus.join(layout::REMOVED)).unwrap();
    assert_eq!(removed.lines().count(), 1 + 24);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(corpus.join("MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(manifest["parameters"]["filter_fraction"], serde_json::json!(0.1));
    assert_eq!(manifest["outputs"][0]["path"], "corpus/articles.csv");
}

#[test]
fn mock_scoring_twice_gives_identical_score_stores() {
    let (dir, config) = small_campaign();
    assert_eq!(refqual(&config, &["ingest"]).0, 0);
    let store = |name: &str| {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        assert_eq!(refqual(&config, &["--out", o, "ingest"]).0, 0);
        let (code, msg) = refqual(&config, &["--out", o, "--backend", "mock", "--seed", "7", "score"]);
        assert_eq!(code, 0, "{msg}");
        assert_eq!(refqual(&config, &["--out", o, "parse"]).0, 0);
        std::fs::read(out.join(layout::PARSED).join(layout::SCORE_STORE)).unwrap()
    };
    let first = store("one");
    let second = store("two");
    assert!(!first.is_empty());
    assert_eq!(first, second);
}

#[test]
fn missing_upstream_artifact_names_the_producer() {
    let (_dir, config) = small_campaign();
    let cli = refqual_cli::Cli {
        config: config.clone(),
        overrides: Default::default(),
        command: refqual_cli::Command::Correlate,
    };
    let err = refqual_cli::execute(&cli, &mut &b""[..], &mut Vec::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("refqual ingest"), "{err}");

    assert_eq!(refqual(&config, &["ingest"]).0, 0);
    let err = refqual_cli::execute(&cli, &mut &b""[..], &mut Vec::new()).unwrap_err();
    assert!(err.to_string().contains("refqual aggregate"), "{err}");
    assert_eq!(refqual(&config, &["parse"]).0, 2);
}

#[test]
fn live_backend_without_credential_is_a_backend_failure() {
    let (_dir, config) = small_campaign();
    assert_eq!(refqual(&config, &["ingest"]).0, 0);
    std::env::remove_var("REFQUAL_API_KEY");
    assert_eq!(refqual(&config, &["--backend", "live", "score"]).0, 3);
}

#[test]
fn bad_config_and_bad_flags_are_usage_errors() {
    let (dir, config) = small_campaign();
    assert_eq!(refqual(&config, &["--repetitions", "0", "ingest"]).0, 1);
    assert_eq!(refqual(&config, &["--cost-a=-1", "ingest"]).0, 1);
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "output_dir = 3\n").unwrap();
    assert_eq!(refqual(&broken, &["ingest"]).0, 1);
}

#[test]
fn prompt_preview_prints_system_and_user_prompts() {
    let (_dir, config) = small_campaign();
    let (code, text) = refqual(&config, &["prompt-preview", "--limit", "2"]);
    assert_eq!(code, 0);
    assert_eq!(text.matches("--- system ---").count(), 2);
    assert!(text.contains("Score this article:"));
}

#[test]
fn resolve_loop_records_answers_and_parse_applies_them() {
    let (dir, config) = small_campaign();
    for stage in ["ingest", "score", "parse"] {
        assert_eq!(refqual(&config, &[stage]).0, 0, "{stage}");
    }
    let parsed = dir.path().join("out").join(layout::PARSED);
    let queue = std::fs::read_to_string(parsed.join(layout::UNRESOLVED)).unwrap();
    let pending = queue.lines().count() - 1;
    assert!(pending >= 2, "the small campaign should leave a manual queue");

    // A bad answer is asked again; blank stops after two items.
    let (code, transcript) = refqual_stdin(&config, &["resolve"], "7\n3\nno score\n\n");
    assert_eq!(code, 0);
    assert!(transcript.contains("outside [1, 4]"));
    let saved = std::fs::read_to_string(parsed.join(layout::RESOLUTIONS)).unwrap();
    assert_eq!(saved.lines().count(), 3);

    let (_, msg) = refqual(&config, &["parse"]);
    assert!(msg.contains(&format!("{} unresolved", pending - 2)), "{msg}");
    let exclusions = std::fs::read_to_string(parsed.join(layout::EXCLUSIONS)).unwrap();
    assert!(exclusions.lines().count() >= 2);
}

#[test]
fn full_pipeline_bundles_every_table() {
    let (dir, config) = small_campaign();
    let (code, msg) = refqual(&config, &["pipeline"]);
    assert_eq!(code, 0, "{msg}");
    let report = dir.path().join("out").join(layout::REPORT);
    for f in [
        layout::GOLD,
        layout::REMOVED,
        layout::SCORE_STORE,
        layout::RUN_MEANS,
        layout::COMBINED,
        layout::NLCS_VALUES,
        layout::CORRELATIONS,
        layout::CI_OVERLAP,
        layout::YEAR_TREND,
        layout::MEAN_SUMMARY,
        layout::COST_CURVE,
        "MANIFEST.json",
    ] {
        assert!(report.join(f).is_file(), "{f} missing from report");
    }
    let curve = std::fs::read_to_string(report.join(layout::COST_CURVE)).unwrap();
    assert_eq!(curve.lines().count(), 1 + 35);
    let correlations = std::fs::read_to_string(report.join(layout::CORRELATIONS)).unwrap();
    for id in ["mock-large", "mock-mini", "combined", "nlcs_2021", "nlcs_2024"] {
        assert!(correlations.contains(&format!("{id},ALL,")), "{id} has no ALL row");
    }
    let cost_manifest = std::fs::read_to_string(dir.path().join("out/cost/MANIFEST.json")).unwrap();
    assert!(cost_manifest.contains("permutation"));
}

#[test]
fn config_fuzz_seeds_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/parse_config");
    for entry in std::fs::read_dir(dir).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        let c: refqual_cli::config::CampaignConfig = toml::from_str(&text).unwrap();
        c.validate().unwrap();
    }
}
