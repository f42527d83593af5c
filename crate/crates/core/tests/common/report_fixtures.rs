//! Loader and checker for the hand-labelled report fixtures. Shared by the
//! parser integration test and the CLI acceptance suite.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use refqual::report_parser::extract_scores;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/reports")
}

#[derive(Debug)]
pub struct Label {
    pub file: String,
    pub shape: String,
    /// `None` means the report must go to the manual queue.
    pub expected: Option<f64>,
    pub method: String,
}

#[derive(Debug, Default)]
pub struct FixtureReport {
    pub total: usize,
    pub mismatches: Vec<String>,
    pub shapes: BTreeSet<String>,
}

pub fn labels(dir: &Path) -> Vec<Label> {
    let mut rdr = csv::Reader::from_path(dir.join("labels.csv")).expect("labels.csv");
    rdr.records()
        .map(|r| {
            let r = r.expect("label row");
            Label {
                file: r[0].to_owned(),
                shape: r[1].to_owned(),
                expected: match &r[2] {
                    "unresolved" => None,
                    v => Some(v.parse().expect("numeric label")),
                },
                method: r[3].to_owned(),
            }
        })
        .collect()
}

pub fn check_all(dir: &Path) -> FixtureReport {
    let mut report = FixtureReport::default();
    for label in labels(dir) {
        let text = std::fs::read_to_string(dir.join(&label.file)).expect("fixture text");
        let got = extract_scores(&text).resolve();
        let ok = match (got, label.expected) {
            (None, None) => true,
            (Some((v, m)), Some(e)) => v == e && m.as_str() == label.method,
            _ => false,
        };
        if !ok {
            report.mismatches.push(format!(
                "{}: expected {:?} {}, got {:?}",
                label.file, label.expected, label.method, got
            ));
        }
        report.total += 1;
        report.shapes.insert(label.shape);
    }
    report
}
