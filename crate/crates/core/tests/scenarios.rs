use std::path::PathBuf;

use moqgate_core::harness::{self, Format, HarnessError, Report, Scenario};

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn load(name: &str) -> Scenario {
    harness::load_scenario(path(name)).unwrap()
}

#[test]
fn bundled_scenarios_pass_every_check() {
    for name in ["paper_replication", "strobe_impulse", "multi_category", "random_delays"] {
        let report = harness::run_scenario(&load(name)).unwrap();
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{name}: {failed:?}");
    }
}

#[test]
fn report_json_round_trips_verdicts() {
    let report = harness::run_scenario(&load("strobe_impulse")).unwrap();
    let back = Report::from_json(&report.to_json()).unwrap();
    assert_eq!(back.to_json(), report.to_json());
    assert_eq!(
        harness::render(&back, Format::Text),
        harness::render(&report, Format::Text)
    );
}

#[test]
fn csv_has_a_row_per_group_and_client() {
    let s = load("multi_category");
    let report = harness::run_scenario(&s).unwrap();
    let csv = harness::render_csv(&report);
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, report.groups.len() * s.clients.len());
}

#[test]
fn text_summary_reports_added_latency_band() {
    let report = harness::run_scenario(&load("paper_replication")).unwrap();
    let text = harness::render_text(&report);
    let line = text
        .lines()
        .find(|l| l.contains("added_latency:filterer"))
        .expect("added-latency check line");
    assert!(line.starts_with("PASS"), "{line}");
    assert!(line.contains("[990, 1010]"), "{line}");
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = harness::run_scenario(&load("paper_replication")).unwrap();
    for format in [Format::Json, Format::Csv, Format::Text] {
        let out = harness::report_render(&report, format, dir.path()).unwrap();
        assert!(out.exists());
    }
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert_eq!(json.trim_end(), report.to_json().trim_end());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let report = harness::run_scenario(&load("paper_replication")).unwrap();
    let err = harness::report_render(&report, Format::Json, blocker.join("sub")).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }), "{err:?}");
}

#[test]
fn uncovered_filter_fails_to_load() {
    let text = r#"{
        "name": "uncovered", "seed": 1,
        "source": {"width": 8, "height": 8, "fps": 10, "gop_duration_ms": 1000,
                   "segments": [{"kind": "constant", "level": 1, "duration_ms": 1000}]},
        "clients": [{"name": "a", "analyze": ["STROBE"]}, {"name": "f", "filter": ["SMOKING"]}]
    }"#;
    assert!(matches!(Scenario::from_json(text), Err(HarnessError::Uncovered(_))));
}

#[test]
fn time_cap_yields_partial_report() {
    let mut s = load("paper_replication");
    s.max_time_ms = 3000;
    match harness::run_scenario(&s) {
        Err(HarnessError::Timeout { cap_ms, partial }) => {
            assert_eq!(cap_ms, 3000);
            assert!(partial.final_time_ms <= 3000);
            assert!(partial.groups.iter().any(|g| g.relay_ingest_ms.is_some()));
        }
        other => panic!("expected timeout, got {:?}", other.map(|r| r.scenario)),
    }
}

#[test]
fn seed_changes_drawn_links() {
    let mut s = load("random_delays");
    let a = harness::resolve_links(&s);
    s.seed += 1;
    let b = harness::resolve_links(&s);
    assert_ne!(a, b);
}
