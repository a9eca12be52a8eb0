use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pulsefocus::analytics::{aggregate_bias, colouring, pulse_series};
use pulsefocus::controller::{run_episode, BudgetConfig, EpisodeSpec, Scripted};
use pulsefocus::format::{parse, serialize, validate_transcript, Parser};
use pulsefocus::gating::{build_gate, focus_mass, gated_distribution_oracle, FocusSet, GateConfig};
use pulsefocus::layout::TokenLayout;
use pulsefocus::model::{softmax_with_offsets, TokenId, Tokenizer};
use pulsefocus::synthetic::{random_script, random_sections, PlantedBias, SyntheticBackend};
use pulsefocus::trace::{BlockMode, EpisodeMode};
use pulsefocus::trace_io::{format_float, read_trace_from, write_trace_to};

fn layout_strategy() -> impl Strategy<Value = TokenLayout> {
    (1usize..5, prop::collection::vec((1usize..6, 0usize..3), 1..7)).prop_map(|(head, images)| {
        let mut b = TokenLayout::builder().text(head);
        for (len, gap) in images {
            b = b.image(len).text(gap);
        }
        b.build()
    })
}

/// Layout, focus set, trailing generated positions and scores for one row.
fn row_strategy() -> impl Strategy<Value = (TokenLayout, Vec<usize>, Vec<f64>)> {
    layout_strategy().prop_flat_map(|layout| {
        let n = layout.num_images();
        let len = layout.total_len();
        (
            Just(layout),
            prop::collection::btree_set(1..=n, 1..=n).prop_map(|s| s.into_iter().collect::<Vec<_>>()),
            (0usize..5).prop_flat_map(move |extra| prop::collection::vec(-6.0f64..6.0, len + extra)),
        )
    })
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut row = scores.to_vec();
    softmax_with_offsets(&mut row, None);
    row
}

fn focused(row: &[f64], layout: &TokenLayout, focus: &FocusSet) -> f64 {
    focus.iter().map(|j| focus_mass(row, layout, j).unwrap()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn oracle_rows_are_distributions((layout, focus, scores) in row_strategy(), lambda in 0.0f64..8.0) {
        let focus = FocusSet::new(focus).unwrap();
        let row = gated_distribution_oracle(&softmax(&scores), &layout, &focus, lambda).unwrap();
        prop_assert!(row.iter().all(|&a| a >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_agrees_with_shifted_softmax((layout, focus, scores) in row_strategy(), lambda in 0.0f64..8.0) {
        let focus = FocusSet::new(focus).unwrap();
        let gate = build_gate(&layout, &focus, &GateConfig::new(lambda).unwrap(), scores.len()).unwrap();
        let mut shifted = scores.clone();
        softmax_with_offsets(&mut shifted, Some(gate.offsets()));
        let oracle = gated_distribution_oracle(&softmax(&scores), &layout, &focus, lambda).unwrap();
        for (a, b) in shifted.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_lambda_is_identity((layout, focus, scores) in row_strategy()) {
        let focus = FocusSet::new(focus).unwrap();
        let base = softmax(&scores);
        prop_assert_eq!(gated_distribution_oracle(&base, &layout, &focus, 0.0).unwrap(), base);
        prop_assert!(build_gate(&layout, &focus, &GateConfig::new(0.0).unwrap(), scores.len()).unwrap().is_zero());
    }

    #[test]
    fn focused_mass_grows_with_lambda((layout, focus, scores) in row_strategy(), a in 0.0f64..6.0, b in 0.0f64..6.0) {
        let focus = FocusSet::new(focus).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let base = softmax(&scores);
        let m_lo = focused(&gated_distribution_oracle(&base, &layout, &focus, lo).unwrap(), &layout, &focus);
        let m_hi = focused(&gated_distribution_oracle(&base, &layout, &focus, hi).unwrap(), &layout, &focus);
        prop_assert!(m_hi >= m_lo - 1e-15);
    }

    #[test]
    fn gate_touches_only_unfocused_image_positions((layout, focus, scores) in row_strategy(), lambda in 0.01f64..8.0) {
        let focus = FocusSet::new(focus).unwrap();
        let gate = build_gate(&layout, &focus, &GateConfig::new(lambda).unwrap(), scores.len()).unwrap();
        prop_assert_eq!(gate.len(), scores.len());
        for (p, &d) in gate.offsets().iter().enumerate() {
            let expected = match layout.image_at(p) {
                Some(j) if !focus.contains(j) => -lambda,
                _ => 0.0,
            };
            prop_assert_eq!(d, expected);
        }
    }

    #[test]
    fn softmax_survives_extreme_offsets(scores in prop::collection::vec(-1e3f64..1e3, 1..40), big in 1e2f64..1e6) {
        let offsets: Vec<f64> = (0..scores.len()).map(|i| if i % 2 == 0 { -big } else { 0.0 }).collect();
        let mut row = scores.clone();
        softmax_with_offsets(&mut row, Some(&offsets));
        prop_assert!(row.iter().all(|a| a.is_finite() && *a >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transcripts_round_trip(seed in any::<u64>(), n in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sections = random_sections(&mut rng, n);
        let text = serialize(&sections, n).unwrap();
        let doc = parse(&text, n).unwrap();
        prop_assert_eq!(&doc.sections, &sections);
        prop_assert_eq!(serialize(&doc.sections, n).unwrap(), text.clone());
        prop_assert!(!validate_transcript(&text, n).has_errors());
    }

    #[test]
    fn parser_events_ignore_chunking(seed in any::<u64>(), n in 1usize..=6, cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = serialize(&random_sections(&mut rng, n), n).unwrap();
        let mut whole = Parser::new(n);
        let mut expected = whole.feed(&text).unwrap();
        expected.extend(whole.finish().unwrap());

        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(text.len() + 1)).filter(|&c| text.is_char_boundary(c)).collect();
        points.sort_unstable();
        let mut parser = Parser::new(n);
        let mut events = Vec::new();
        let mut from = 0;
        for c in points.into_iter().chain(std::iter::once(text.len())) {
            events.extend(parser.feed(&text[from..c]).unwrap());
            from = c;
        }
        events.extend(parser.finish().unwrap());
        prop_assert_eq!(events, expected);
    }

    #[test]
    fn floats_keep_nine_significant_digits(x in prop::num::f64::NORMAL) {
        let s = format_float(x);
        let back: f64 = s.parse().unwrap();
        prop_assert!(((back - x) / x).abs() <= 5e-9, "{x} -> {s}");
        let digits = s.trim_start_matches('-').split('e').next().unwrap().chars().filter(char::is_ascii_digit).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() <= 9, "{s}");
    }

    #[test]
    fn bias_means_ignore_input_order(seed in any::<u64>(), count in 2usize..30) {
        let traces = PlantedBias::new(0.8).traces(count, seed);
        let mut per: Vec<(String, Vec<f64>)> = traces
            .iter()
            .map(|t| (t.metadata.tag.clone().unwrap(), pulsefocus::analytics::mean_image_mass(&pulse_series(t).unwrap())))
            .collect();
        let a = aggregate_bias(&per);
        per.reverse();
        let b = aggregate_bias(&per);
        for (x, y) in a.positions.iter().zip(&b.positions) {
            prop_assert_eq!(x.n, y.n);
            prop_assert!((x.mean - y.mean).abs() < 1e-12 && (x.std - y.std).abs() < 1e-12);
        }
    }

    #[test]
    fn colouring_picks_the_largest_image(seed in any::<u64>(), threshold in 0.0f64..1.0) {
        let trace = PlantedBias::new(0.9).trace(0, seed);
        let series = pulse_series(&trace).unwrap();
        for rec in colouring(&series, threshold) {
            let masses = &series.images[rec.step];
            let d = rec.dominant.unwrap();
            prop_assert!(masses.iter().all(|&m| m <= masses[d - 1]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn traces_round_trip_exactly(seed in any::<u64>(), index in 0usize..50) {
        let trace = PlantedBias::new(0.7).trace(index, seed);
        let mut buf = Vec::new();
        write_trace_to(&trace, &mut buf).unwrap();
        let back = read_trace_from(&buf[..]).unwrap();
        prop_assert_eq!(back, trace);
    }

    #[test]
    fn episodes_respect_arbitrary_budgets(
        seed in any::<u64>(),
        n in 1usize..=6,
        plan in 1usize..48,
        focus in 1usize..48,
        cycles in 1usize..6,
        lambda in 0.0f64..4.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok = Tokenizer::default();
        let mut b = TokenLayout::builder().text(3);
        for _ in 0..n {
            b = b.image(3).text(1);
        }
        let layout = b.build();
        let prompt: Vec<TokenId> = (0..layout.total_len()).map(|_| rng.random_range(0..tok.vocab_size()) as TokenId).collect();
        let mut spec = EpisodeSpec::new(prompt, layout, EpisodeMode::PulseFocus);
        spec.budget = BudgetConfig::new(plan, focus, cycles);
        spec.gate = GateConfig::new(lambda).unwrap();
        let script = random_script(&mut rng, n);
        let r = run_episode(&SyntheticBackend::new(tok.vocab_size(), seed), &spec, &mut Scripted::from_text(&script)).unwrap();

        prop_assert!(r.budget_state.longest_plan <= plan);
        prop_assert!(r.budget_state.longest_focus <= focus);
        prop_assert!(r.budget_state.cycles_completed <= cycles);
        prop_assert!(r.budget_state.terminated_reason.is_some());
        let report = validate_transcript(&r.transcript, n);
        prop_assert!(!report.has_errors(), "{:?}\n{}", report.findings, r.transcript);
        prop_assert!(report.focus_blocks <= cycles);
        for step in &r.trace.steps {
            let in_focus = step.annotation.as_ref().unwrap().mode == BlockMode::Focus;
            prop_assert_eq!(step.gated, in_focus && lambda > 0.0);
        }
        prop_assert!(pulse_series(&r.trace).unwrap().conservation_error() < 1e-9);
    }
}
