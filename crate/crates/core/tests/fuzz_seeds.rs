//! Replays the checked-in fuzz seeds through the same entry points the fuzz
//! targets drive, so a regression shows up without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use refqual::{analysis, corpus, indicators, prompts, report_parser};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn article_seeds_parse() {
    for (name, data) in seeds("parse_articles") {
        let (articles, _) = corpus::parse_articles(&name, &data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!articles.is_empty(), "{name}");
    }
}

#[test]
fn profile_seeds_parse() {
    for (name, data) in seeds("parse_profiles") {
        let (profiles, rejects) = corpus::parse_profiles(&name, &data).unwrap();
        assert!(rejects.is_empty() && !profiles.is_empty(), "{name}");
    }
}

#[test]
fn report_seeds_stay_in_range() {
    for (name, data) in seeds("parse_report") {
        let e = report_parser::extract_scores(&String::from_utf8_lossy(&data));
        for v in [e.overall, e.originality, e.significance, e.rigour]
            .into_iter()
            .flatten()
        {
            assert!(
                (report_parser::MIN_STAR..=report_parser::MAX_STAR).contains(&v),
                "{name}: {v}"
            );
        }
    }
}

#[test]
fn citation_seeds_give_finite_nlcs() {
    for (name, data) in seeds("parse_citations") {
        let records = indicators::parse_citations(&name, "s", &data).unwrap_or_else(|e| panic!("{name}: {e}"));
        let reference = indicators::build_reference("s", &records);
        for r in &records {
            let v = indicators::nlcs(r, &reference).unwrap();
            assert!(v.value.is_finite() && v.value >= 0.0);
        }
    }
}

#[test]
fn manifest_seeds_parse() {
    for (name, data) in seeds("parse_manifest") {
        let entries = prompts::parse_manifest(std::str::from_utf8(&data).unwrap()).unwrap();
        assert!(!entries.is_empty(), "{name}");
    }
}

#[test]
fn table_seeds_are_read_by_their_reader() {
    for (name, data) in seeds("read_tables") {
        let ok = match name.as_str() {
            "scores.csv" => report_parser::read_score_store(&name, &data[..]).is_ok(),
            "unresolved.csv" => report_parser::read_unresolved(&name, &data[..]).is_ok(),
            "resolutions.csv" => report_parser::read_resolutions(&name, &data[..]).is_ok(),
            "theoretical_max.csv" => analysis::read_theoretical_max(&name, &data[..]).is_ok(),
            "nlcs.csv" => indicators::read_nlcs(&name, &data[..]).is_ok(),
            _ => panic!("unexpected seed {name}"),
        };
        assert!(ok, "{name}");
        // Every other reader must reject or accept without panicking.
        let _ = report_parser::read_score_store(&name, &data[..]);
        let _ = report_parser::read_unresolved(&name, &data[..]);
        let _ = report_parser::read_resolutions(&name, &data[..]);
        let _ = analysis::read_theoretical_max(&name, &data[..]);
        let _ = indicators::read_nlcs(&name, &data[..]);
    }
}

#[test]
fn truncated_seeds_never_panic() {
    for target in ["parse_articles", "parse_profiles", "parse_citations", "read_tables"] {
        for (name, data) in seeds(target) {
            for cut in (0..data.len()).step_by(7) {
                let d = &data[..cut];
                let _ = corpus::parse_articles(&name, d);
                let _ = corpus::parse_profiles(&name, d);
                let _ = indicators::parse_citations(&name, "s", d);
                let _ = report_parser::read_score_store(&name, d);
                let _ = report_parser::read_resolutions(&name, d);
            }
        }
    }
}
