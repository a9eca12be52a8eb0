use std::fs;
use std::path::PathBuf;

use pulsefocus::analytics::{positional_bias, pulse_series};
use pulsefocus::controller::TerminationReason;
use pulsefocus::format::{BlockKind, EventKind, FocusImages};
use pulsefocus::run::RunSpec;
use pulsefocus::synthetic::PlantedBias;
use pulsefocus::trace::BlockMode;
use pulsefocus::trace_io::{analyze, bias_csv, plot_data_csv, replay, write_trace, AnalysisRequest, Source};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture_spec() -> RunSpec {
    let read = |name: &str| fs::read_to_string(fixtures().join(name)).unwrap();
    RunSpec {
        seed: 342,
        template: read("prompt-template.txt"),
        script: Some(read("case342-like.txt")),
        tag: Some("counting".into()),
        ..RunSpec::default()
    }
}

/// Compares against `fixtures/golden/<name>`; `PULSEFOCUS_BLESS=1` rewrites it.
fn check_golden(name: &str, actual: &str) {
    let path = fixtures().join("golden").join(name);
    if std::env::var_os("PULSEFOCUS_BLESS").is_some_and(|v| v == "1") {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (run with PULSEFOCUS_BLESS=1)", path.display()));
    if expected != actual {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b);
        panic!("{name} differs from golden (first differing line {line:?})");
    }
}

#[test]
fn fixture_csvs_match_golden() {
    let result = fixture_spec().run().unwrap();
    let reports = analyze(&result.trace, &AnalysisRequest::all(), Source::Live).unwrap();
    check_golden("case342.pulse.csv", reports.pulse_csv.as_deref().unwrap());
    check_golden("case342.colouring.csv", reports.colouring_csv.as_deref().unwrap());
    check_golden("case342.alignment.csv", reports.alignment_csv.as_deref().unwrap());
    check_golden("case342.plot.csv", &plot_data_csv(&pulse_series(&result.trace).unwrap()).unwrap());
}

#[test]
fn replayed_fixture_matches_golden() {
    let result = fixture_spec().run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case342.trace.jsonl");
    write_trace(&result.trace, &path).unwrap();
    let reports = replay(&path, &AnalysisRequest::all()).unwrap();
    assert_eq!(reports.source, Source::Replay);
    check_golden("case342.pulse.csv", reports.pulse_csv.as_deref().unwrap());
    check_golden("case342.alignment.csv", reports.alignment_csv.as_deref().unwrap());
}

#[test]
fn planted_bias_matches_golden() {
    let traces = PlantedBias::new(0.7).traces(200, 0);
    let report = positional_bias(&traces, |t| t.metadata.tag.clone().unwrap_or_default()).unwrap();
    check_golden("planted-bias.csv", &bias_csv(&report).unwrap());
}

#[test]
fn fixture_episode_follows_the_script() {
    let result = fixture_spec().run().unwrap();
    let script = fs::read_to_string(fixtures().join("case342-like.txt")).unwrap();
    assert_eq!(result.transcript, script.trim_end());
    assert_eq!(result.budget_state.terminated_reason, Some(TerminationReason::EndDirective));
    assert_eq!(result.budget_state.cycles_completed, 6);
    assert_eq!(result.budget_state.forced_closures, 0);
    assert_eq!(result.answer, Some('B'));

    let focus_starts: Vec<_> = result
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::BlockStart(BlockKind::Focus(images)) => Some(images.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(focus_starts, (1..=6).map(FocusImages::single).collect::<Vec<_>>());

    // Gated steps are exactly the focus-body steps, and the fifth block gates on image 5.
    for step in &result.trace.steps {
        let a = step.annotation.as_ref().unwrap();
        assert_eq!(step.gated, a.mode == BlockMode::Focus, "step {}", step.index);
    }
    let i5 = result.events.iter().find(|e| e.kind == EventKind::BlockStart(BlockKind::Focus(FocusImages::single(5)))).unwrap();
    let first = i5.token_span.as_ref().unwrap().end;
    assert_eq!(result.trace.steps[first].annotation.as_ref().unwrap().focus, Some(vec![5]));
}

#[test]
fn fixture_focus_lifts_focused_share() {
    let on = fixture_spec().run().unwrap();
    let off = RunSpec { lambda: 0.0, ..fixture_spec() }.run().unwrap();
    let align = |r: &pulsefocus::controller::EpisodeResult| {
        let series = pulse_series(&r.trace).unwrap();
        pulsefocus::analytics::focus_alignment(&r.trace, &series).unwrap()
    };
    let (a_on, a_off) = (align(&on), align(&off));
    assert_eq!(a_on.blocks.len(), 6);
    for (b_on, b_off) in a_on.blocks.iter().zip(&a_off.blocks) {
        assert!(b_on.alignment > b_off.alignment, "{b_on:?} vs {b_off:?}");
    }
}
