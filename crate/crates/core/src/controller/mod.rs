//! Episode orchestration.
//!
//! Each generated token is decoded to text and fed to the grammar parser
//! straight away, so block boundaries always fall on token boundaries. The
//! gate for the forward pass that produces token `k` is decided from the
//! parser state after tokens `< k`: it is on only while a focus block body is
//! open with no tag in progress. Consequently opening-tag tokens are decided
//! ungated, and the first token of a closing tag is still decided under the
//! gate (the controller cannot know it is a tag before it is chosen).
//!
//! When a block reaches its cap, when the total cap is reached, when the
//! token source runs dry, or when the policy emits text the grammar rejects,
//! the controller injects the shortest text that closes whatever is open
//! (see [`Parser::closing_continuation`]), so every transcript stays valid.
//!
//! After `END` or the last permitted cycle the plan/focus loop is over; the
//! policy may still write a `Summary:` trailer and an `<answer>` within
//! `answer_max_tokens`, but opening another plan or focus block stops the
//! episode.

mod backend;
mod budget;
mod policy;

use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use thiserror::Error;

pub use backend::{BackendSession, EpisodeBackend, GateRequest};
pub use budget::{
    BudgetConfig, BudgetState, TerminationReason, DEFAULT_ANSWER_MAX_TOKENS, DEFAULT_FOCUS_MAX_TOKENS,
    DEFAULT_MAX_CYCLES, DEFAULT_PLAN_MAX_TOKENS,
};
pub use policy::{Greedy, Sampler, Scripted, TokenPolicy};

use crate::format::{
    BlockEvent, BlockKind, EventKind, FocusImages, Parser, ParserMode, PlanDirective, CLOSE_ANSWER, CLOSE_FOCUS,
    CLOSE_PLAN, OPEN_ANSWER,
};
use crate::gating::{build_gate, FocusSet, GateConfig, GateVector, GatingError};
use crate::layout::{ImageIndex, TokenLayout};
use crate::model::{ModelError, TokenId, Tokenizer, Utf8Stream};
use crate::trace::{Annotation, AttentionTrace, BlockMode, EpisodeMode, Seeds, TraceMetadata, TraceStep};

/// Tokens kept back from the total cap so a final forced closure always fits.
const CLOSURE_RESERVE: usize = 32;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("prompt of {prompt} tokens leaves no room to decode (capacity {capacity})")]
    NoRoom { prompt: usize, capacity: usize },
}

/// Everything that defines an episode apart from the backend and policy.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub prompt: Vec<TokenId>,
    pub layout: TokenLayout,
    pub mode: EpisodeMode,
    pub gate: GateConfig,
    pub budget: BudgetConfig,
    /// Keep every selected-layer row in the trace, not just the mean.
    pub record_raw: bool,
    pub seeds: Seeds,
    pub tag: Option<String>,
}

impl EpisodeSpec {
    pub fn new(prompt: Vec<TokenId>, layout: TokenLayout, mode: EpisodeMode) -> Self {
        Self {
            prompt,
            layout,
            mode,
            gate: GateConfig::default(),
            budget: BudgetConfig::default(),
            record_raw: false,
            seeds: Seeds::default(),
            tag: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub transcript: String,
    pub tokens: Vec<TokenId>,
    pub events: Vec<BlockEvent>,
    pub trace: AttentionTrace,
    pub budget_state: BudgetState,
    /// Trimmed body of the answer block.
    pub answer_text: Option<String>,
    /// Choice letter parsed from the answer, e.g. `B` from `(B)`.
    pub answer: Option<char>,
}

impl EpisodeResult {
    pub fn gated_steps(&self) -> usize {
        self.trace.steps.iter().filter(|s| s.gated).count()
    }
}

/// Focus set whose gate applies to the next decode step, if any.
pub fn gate_focus(parser: &Parser, mode: EpisodeMode) -> Option<FocusSet> {
    if mode != EpisodeMode::PulseFocus {
        return None;
    }
    parser.in_focus_body().map(|images| FocusSet::new(images.as_slice().iter().copied()).expect("non-empty"))
}

/// Gate vector for the next decode step over `attended_len` positions.
pub fn gate_schedule(
    parser: &Parser,
    mode: EpisodeMode,
    layout: &TokenLayout,
    config: &GateConfig,
    attended_len: usize,
) -> Result<Option<GateVector>, GatingError> {
    gate_focus(parser, mode).map(|f| build_gate(layout, &f, config, attended_len)).transpose()
}

/// Choice letter at the start of an answer: `B`, `(B)`, `B.` or `B) ...`.
pub fn answer_letter(text: &str) -> Option<char> {
    let t = text.trim();
    let t = t.strip_prefix('(').unwrap_or(t);
    let mut chars = t.chars();
    let c = chars.next().filter(|c| c.is_ascii_uppercase())?;
    match chars.next() {
        None => Some(c),
        Some(n) if !n.is_alphanumeric() => Some(c),
        _ => None,
    }
}

fn annotate(parser: &Parser) -> Annotation {
    match parser.mode() {
        ParserMode::InPlan => Annotation::new(BlockMode::Plan),
        ParserMode::InFocus(images) => Annotation::focus(images.sorted()),
        ParserMode::InAnswer => Annotation::new(BlockMode::Answer),
        _ if parser.in_summary() => Annotation::new(BlockMode::Summary),
        _ => Annotation::new(BlockMode::Outside),
    }
}

fn fallback_directive(focused: &BTreeSet<ImageIndex>, num_images: usize) -> PlanDirective {
    match (1..=num_images).find(|j| !focused.contains(j)) {
        Some(j) => PlanDirective::NextFocus(FocusImages::single(j)),
        None => PlanDirective::End,
    }
}

fn block_closer(mode: &ParserMode) -> Option<&'static str> {
    match mode {
        ParserMode::InPlan => Some(CLOSE_PLAN),
        ParserMode::InFocus(_) => Some(CLOSE_FOCUS),
        ParserMode::InAnswer => Some(CLOSE_ANSWER),
        _ => None,
    }
}

/// True when `parser` has started something other than an answer.
fn leaves_wrap_up(parser: &Parser) -> bool {
    match parser.mode() {
        ParserMode::InPlan | ParserMode::InFocus(_) => true,
        ParserMode::OutsideBlock => !OPEN_ANSWER.starts_with(parser.pending_tag()),
        _ => false,
    }
}

struct Episode<'s> {
    session: Box<dyn BackendSession + 's>,
    tokenizer: Tokenizer,
    parser: Parser,
    utf8: Utf8Stream,
    queue: VecDeque<TokenId>,
    stopping: bool,
    state: BudgetState,
    focused: BTreeSet<ImageIndex>,
}

impl Episode<'_> {
    /// Queues the text that closes every open construct.
    fn force_close(&mut self) {
        self.utf8 = Utf8Stream::default();
        let fallback = fallback_directive(&self.focused, self.parser.num_images());
        let text = self.parser.closing_continuation(&fallback);
        if !text.is_empty() {
            self.state.forced_closures += 1;
            self.queue.extend(self.tokenizer.encode(&text));
        }
    }

    fn stop(&mut self, reason: TerminationReason) {
        self.force_close();
        self.stopping = true;
        self.state.terminated_reason.get_or_insert(reason);
    }
}

/// Runs one episode to termination.
///
/// Errors only on backend failures; grammar violations by the policy end
/// the episode with [`TerminationReason::GrammarError`].
pub fn run_episode(
    backend: &dyn EpisodeBackend,
    spec: &EpisodeSpec,
    policy: &mut dyn TokenPolicy,
) -> Result<EpisodeResult, ControllerError> {
    spec.budget.validate().map_err(ControllerError::Budget)?;
    let budget = spec.budget;
    let grammar = spec.mode.uses_grammar();
    let n = spec.layout.num_images();
    let session = backend.start(&spec.prompt, &spec.layout)?;
    let capacity = session.capacity();
    let prompt_len = spec.prompt.len();
    if capacity <= prompt_len {
        return Err(ControllerError::NoRoom { prompt: prompt_len, capacity });
    }
    let hard_limit = budget.total_token_cap.min(capacity - prompt_len);
    let policy_limit = hard_limit.saturating_sub(CLOSURE_RESERVE);

    let metadata = TraceMetadata {
        lambda: if spec.mode == EpisodeMode::PulseFocus { spec.gate.lambda() } else { 0.0 },
        mode: spec.mode,
        seeds: Seeds { model: spec.seeds.model.or(backend.model_seed()), ..spec.seeds.clone() },
        model_digest: backend.model_digest(),
        selected_layers: backend.selected_layers(),
        tag: spec.tag.clone(),
    };
    let mut trace = AttentionTrace::new(spec.layout.clone(), metadata);
    let mut ep = Episode {
        session,
        tokenizer: Tokenizer::default(),
        parser: Parser::new(n),
        utf8: Utf8Stream::default(),
        queue: VecDeque::new(),
        stopping: false,
        state: BudgetState::default(),
        focused: BTreeSet::new(),
    };
    let mut transcript = String::new();
    let mut tokens = Vec::new();
    let mut token_ranges: Vec<Range<usize>> = Vec::new();
    let mut events: Vec<BlockEvent> = Vec::new();
    let mut answer_text = None;
    let mut gated = false;
    let mut wrap_up = false;
    let mut wrap_tokens = 0;
    let mut plan_closed = false;

    loop {
        let (token, injected) = match ep.queue.pop_front() {
            Some(t) => (t, true),
            None => {
                if ep.stopping {
                    break;
                }
                if grammar {
                    let cap = match ep.parser.mode() {
                        ParserMode::InPlan => budget.plan_max_tokens,
                        ParserMode::InFocus(_) => budget.focus_max_tokens,
                        _ => usize::MAX,
                    };
                    if ep.state.tokens_in_current_block >= cap {
                        let closer = block_closer(ep.parser.mode()).expect("inside a block");
                        ep.force_close();
                        policy.on_forced_close(closer);
                        continue;
                    }
                    if wrap_up && wrap_tokens >= budget.answer_max_tokens {
                        ep.stop(TerminationReason::BudgetExhausted);
                        continue;
                    }
                }
                if ep.state.total_tokens >= policy_limit {
                    ep.stop(TerminationReason::BudgetExhausted);
                    continue;
                }
                match policy.choose(ep.session.logits()) {
                    Some(t) => (t, false),
                    None => {
                        ep.stop(TerminationReason::EndOfStream);
                        continue;
                    }
                }
            }
        };

        let saved_utf8 = ep.utf8.clone();
        let text = ep.utf8.push(ep.tokenizer.token_bytes(token));
        let annotation = grammar.then(|| annotate(&ep.parser));
        let mut new_events = Vec::new();
        if grammar {
            let mut trial = ep.parser.clone();
            match trial.feed(&text) {
                Ok(evs) if wrap_up && !injected && leaves_wrap_up(&trial) => {
                    let _ = evs;
                    ep.utf8 = saved_utf8;
                    ep.stop(TerminationReason::EndOfStream);
                    continue;
                }
                Ok(evs) => {
                    ep.parser = trial;
                    new_events = evs;
                }
                Err(err) => {
                    assert!(!injected, "injected closure rejected: {err}");
                    log::debug!("grammar error at step {}: {err}", tokens.len());
                    ep.utf8 = saved_utf8;
                    ep.stop(TerminationReason::GrammarError);
                    continue;
                }
            }
        }

        let (attention, raw) = ep.session.attention(spec.record_raw);
        trace.steps.push(TraceStep {
            index: tokens.len(),
            token_id: Some(token),
            token: text.clone(),
            annotation: annotation.clone(),
            injected,
            gated,
            attention,
            raw,
        });
        token_ranges.push(transcript.len()..transcript.len() + text.len());
        transcript.push_str(&text);
        tokens.push(token);
        ep.state.total_tokens += 1;
        if !injected {
            if matches!(annotation.as_ref().map(|a| a.mode), Some(BlockMode::Plan | BlockMode::Focus)) {
                ep.state.tokens_in_current_block += 1;
            }
            if wrap_up {
                wrap_tokens += 1;
            }
        }

        let mut done = false;
        for mut event in new_events {
            event.injected = injected;
            match &event.kind {
                EventKind::BlockStart(BlockKind::Plan) => ep.state.tokens_in_current_block = 0,
                EventKind::BlockStart(BlockKind::Focus(images)) => {
                    ep.state.tokens_in_current_block = 0;
                    ep.focused.extend(images.as_slice());
                }
                EventKind::BlockEnd(BlockKind::Plan) => {
                    ep.state.longest_plan = ep.state.longest_plan.max(ep.state.tokens_in_current_block);
                    ep.state.tokens_in_current_block = 0;
                    plan_closed = true;
                    if ep.parser.last_directive() == Some(&PlanDirective::End) && !wrap_up {
                        wrap_up = true;
                        ep.state.terminated_reason.get_or_insert(TerminationReason::EndDirective);
                    }
                }
                EventKind::BlockEnd(BlockKind::Focus(_)) => {
                    ep.state.longest_focus = ep.state.longest_focus.max(ep.state.tokens_in_current_block);
                    ep.state.tokens_in_current_block = 0;
                    if plan_closed {
                        plan_closed = false;
                        ep.state.cycles_completed += 1;
                        if ep.state.cycles_completed >= budget.max_cycles && !wrap_up {
                            wrap_up = true;
                            ep.state.terminated_reason.get_or_insert(TerminationReason::BudgetExhausted);
                        }
                    }
                }
                EventKind::AnswerText(t) => answer_text = Some(t.clone()),
                EventKind::BlockEnd(BlockKind::Answer) => {
                    ep.state.terminated_reason.get_or_insert(TerminationReason::AnswerEmitted);
                    done = true;
                }
                _ => {}
            }
            events.push(event);
        }
        if !grammar {
            if let Some(end) = transcript.find(CLOSE_ANSWER) {
                if let Some(start) = transcript[..end].rfind(OPEN_ANSWER) {
                    answer_text = Some(transcript[start + OPEN_ANSWER.len()..end].trim().to_string());
                }
                ep.state.terminated_reason.get_or_insert(TerminationReason::AnswerEmitted);
                done = true;
            }
        }
        if done || (ep.stopping && ep.queue.is_empty()) {
            break;
        }

        let focus = gate_focus(&ep.parser, spec.mode);
        gated = focus.is_some() && spec.gate.lambda() > 0.0;
        let request = focus.as_ref().map(|f| GateRequest { focus: f, config: &spec.gate });
        ep.session.step(token, request)?;
    }

    for event in &mut events {
        let start = token_ranges.partition_point(|r| r.end <= event.span.start);
        let end = if event.span.is_empty() { start } else { token_ranges.partition_point(|r| r.end < event.span.end) + 1 };
        event.token_span = Some(start..end.min(token_ranges.len()));
    }
    let answer = answer_text.as_deref().and_then(answer_letter);
    Ok(EpisodeResult {
        transcript,
        tokens,
        events,
        trace,
        budget_state: ep.state,
        answer_text,
        answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::validate_transcript;
    use crate::model::{Model, ModelConfig};

    fn model() -> Model {
        let tok = Tokenizer::default();
        Model::new(ModelConfig::with_head_dim(2, 2, 8, tok.vocab_size(), 512, 5)).unwrap()
    }

    fn layout() -> TokenLayout {
        TokenLayout::builder().text(3).image(4).image(4).image(4).text(2).build()
    }

    fn prompt(layout: &TokenLayout) -> Vec<TokenId> {
        (0..layout.total_len() as TokenId).map(|i| 65 + i % 26).collect()
    }

    fn run(script: &str, mode: EpisodeMode, budget: BudgetConfig) -> EpisodeResult {
        let layout = layout();
        let mut spec = EpisodeSpec::new(prompt(&layout), layout, mode);
        spec.budget = budget;
        run_episode(&model(), &spec, &mut Scripted::from_text(script)).unwrap()
    }

    const SCRIPT: &str = "<plan>Start with the first image. Next focus: I1</plan>\n\
<focus:I1>A single car waits at the kerb.</focus>\n<plan>Next focus: I3</plan>\n<focus:I3>No car here.</focus>\n\
<plan>END</plan>\nSummary: one car.\n<answer> (B) </answer>";

    #[test]
    fn scripted_episode_reproduces_script() {
        let r = run(SCRIPT, EpisodeMode::PulseFocus, BudgetConfig::default());
        assert_eq!(r.transcript, SCRIPT);
        assert_eq!(r.budget_state.terminated_reason, Some(TerminationReason::EndDirective));
        assert_eq!(r.budget_state.cycles_completed, 2);
        assert_eq!(r.answer, Some('B'));
        assert_eq!(r.trace.steps.len(), r.tokens.len());
        for (k, s) in r.trace.steps.iter().enumerate() {
            let crate::trace::StepMass::Row(row) = &s.attention else { panic!() };
            assert_eq!(row.len(), r.trace.prompt_len() + k);
        }
    }

    #[test]
    fn gate_only_inside_focus_bodies() {
        let r = run(SCRIPT, EpisodeMode::PulseFocus, BudgetConfig::default());
        assert!(r.gated_steps() > 0);
        for s in &r.trace.steps {
            let ann = s.annotation.as_ref().unwrap();
            if s.gated {
                assert_eq!(ann.mode, BlockMode::Focus, "step {} {:?}", s.index, s.token);
            }
            if ann.mode == BlockMode::Focus {
                assert!(s.gated);
            }
        }
        // the opening tag token itself is never gated
        let open = r.trace.steps.iter().find(|s| s.token.starts_with("<focus:")).unwrap();
        assert!(!open.gated);
        let none = run(SCRIPT, EpisodeMode::PlanFocusNoGating, BudgetConfig::default());
        assert_eq!(none.gated_steps(), 0);
    }

    #[test]
    fn token_spans_cover_tags() {
        let r = run(SCRIPT, EpisodeMode::PulseFocus, BudgetConfig::default());
        let tok = Tokenizer::default();
        for e in &r.events {
            let span = e.token_span.clone().unwrap();
            let text = tok.decode(&r.tokens[span]);
            if matches!(e.kind, EventKind::BlockStart(BlockKind::Plan)) {
                assert_eq!(text, "<plan>");
            }
            if matches!(e.kind, EventKind::BlockEnd(BlockKind::Focus(_))) {
                assert_eq!(text, "</focus>");
            }
        }
    }

    #[test]
    fn long_plan_is_force_closed_at_the_cap() {
        let body = " the".repeat(300);
        let script = format!("<plan>{body} Next focus: I2</plan><focus:I2>x</focus><answer>A</answer>");
        let r = run(&script, EpisodeMode::PulseFocus, BudgetConfig::default());
        assert_eq!(r.budget_state.longest_plan, 256);
        assert_eq!(r.budget_state.forced_closures, 1);
        let directive = r.events.iter().find(|e| matches!(e.kind, EventKind::Directive(_))).unwrap();
        assert!(directive.injected);
        assert_eq!(directive.kind, EventKind::Directive(PlanDirective::NextFocus(FocusImages::single(1))));
        assert!(!validate_transcript(&r.transcript, 3).has_errors());
        assert_eq!(r.answer, Some('A'));
    }

    #[test]
    fn cycle_cap_stops_the_loop() {
        let script = "<plan>Next focus: I1</plan><focus:I1>x</focus>".repeat(20);
        let budget = BudgetConfig { max_cycles: 3, ..BudgetConfig::default() };
        let r = run(&script, EpisodeMode::PulseFocus, budget);
        assert_eq!(r.budget_state.cycles_completed, 3);
        assert_eq!(r.budget_state.terminated_reason, Some(TerminationReason::BudgetExhausted));
        assert!(!validate_transcript(&r.transcript, 3).has_errors());
    }

    #[test]
    fn grammar_error_is_recorded_and_closed() {
        let r = run("<focus:I2>abc</plan> more", EpisodeMode::PulseFocus, BudgetConfig::default());
        assert_eq!(r.budget_state.terminated_reason, Some(TerminationReason::GrammarError));
        assert_eq!(r.transcript, "<focus:I2>abc</focus>");
        assert!(!validate_transcript(&r.transcript, 3).has_errors());
    }

    #[test]
    fn free_cot_has_no_annotations() {
        let r = run("Thinking <b> freely. <answer>C</answer>", EpisodeMode::FreeCot, BudgetConfig::default());
        assert!(r.trace.steps.iter().all(|s| s.annotation.is_none() && !s.gated));
        assert_eq!(r.answer, Some('C'));
        assert_eq!(r.budget_state.terminated_reason, Some(TerminationReason::AnswerEmitted));
    }

    #[test]
    fn lambda_zero_matches_no_gating() {
        let layout = layout();
        let m = model();
        let mut a = EpisodeSpec::new(prompt(&layout), layout.clone(), EpisodeMode::PulseFocus);
        a.gate = GateConfig::new(0.0).unwrap();
        let b = EpisodeSpec::new(prompt(&layout), layout, EpisodeMode::PlanFocusNoGating);
        let ra = run_episode(&m, &a, &mut Scripted::from_text(SCRIPT)).unwrap();
        let rb = run_episode(&m, &b, &mut Scripted::from_text(SCRIPT)).unwrap();
        assert_eq!(ra.transcript, rb.transcript);
        for (x, y) in ra.trace.steps.iter().zip(&rb.trace.steps) {
            assert_eq!(x.attention, y.attention);
        }
    }

    #[test]
    fn answer_letters() {
        assert_eq!(answer_letter(" B "), Some('B'));
        assert_eq!(answer_letter("(C) three"), Some('C'));
        assert_eq!(answer_letter("D. none"), Some('D'));
        assert_eq!(answer_letter("Because"), None);
        assert_eq!(answer_letter(""), None);
    }
}
