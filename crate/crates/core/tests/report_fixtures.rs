mod common {
    pub mod report_fixtures;
}

use common::report_fixtures::{check_all, fixture_dir, labels};

#[test]
fn every_labelled_report_parses_as_labelled() {
    let report = check_all(&fixture_dir());
    assert!(report.total >= 30, "only {} fixtures", report.total);
    assert!(report.mismatches.is_empty(), "{:#?}", report.mismatches);
}

#[test]
fn fixtures_cover_every_shape() {
    let report = check_all(&fixture_dir());
    for shape in ["overall", "dimension_mean", "fractional", "no_score", "conflict"] {
        assert!(report.shapes.contains(shape), "no `{shape}` fixture");
    }
}

#[test]
fn conflict_fixtures_really_disagree_with_their_dimension_mean() {
    let dir = fixture_dir();
    for l in labels(&dir).iter().filter(|l| l.shape == "conflict") {
        let text = std::fs::read_to_string(dir.join(&l.file)).unwrap();
        let e = refqual::report_parser::extract_scores(&text);
        let dims = e.dims().expect("conflict fixtures state all three dimensions").mean();
        assert_ne!(Some(dims), e.overall, "{}", l.file);
    }
}
