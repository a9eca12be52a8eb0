use super::{
    find_directive, BlockEvent, BlockKind, EventKind, FocusImages, FormatError, PlanDirective, CLOSE_ANSWER,
    CLOSE_FOCUS, CLOSE_PLAN, OPEN_ANSWER, OPEN_FOCUS_PREFIX, OPEN_PLAN, SUMMARY_MARKER,
};
use crate::layout::ImageIndex;
use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParserMode {
    OutsideBlock,
    InPlan,
    InFocus(FocusImages),
    InAnswer,
    Terminated,
}

impl ParserMode {
    fn block_name(&self) -> &'static str {
        match self {
            ParserMode::InPlan => "plan",
            ParserMode::InFocus(_) => "focus",
            ParserMode::InAnswer => "answer",
            _ => "no",
        }
    }

    fn closer(&self) -> Option<&'static str> {
        match self {
            ParserMode::InPlan => Some(CLOSE_PLAN),
            ParserMode::InFocus(_) => Some(CLOSE_FOCUS),
            ParserMode::InAnswer => Some(CLOSE_ANSWER),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tag {
    OpenPlan,
    ClosePlan,
    OpenFocus(FocusImages),
    CloseFocus,
    OpenAnswer,
    CloseAnswer,
}

enum TagStatus {
    Partial,
    Complete(Tag),
}

const OPENERS: [&str; 3] = [OPEN_PLAN, OPEN_ANSWER, OPEN_FOCUS_PREFIX];
const CLOSERS: [&str; 3] = [CLOSE_PLAN, CLOSE_FOCUS, CLOSE_ANSWER];

/// Incremental parser for the plan/focus grammar.
///
/// Every character either advances the state or yields an error; a partial
/// tag is only kept while it can still become a tag that is legal in the
/// current mode, so a pending tag always has a valid completion.
#[derive(Debug, Clone)]
pub struct Parser {
    num_images: usize,
    mode: ParserMode,
    tag: String,
    tag_start: usize,
    offset: usize,
    body: String,
    body_start: usize,
    outside: String,
    summary_open: bool,
    pending_directive: Option<(PlanDirective, Range<usize>)>,
    last_directive: Option<PlanDirective>,
    failed: Option<FormatError>,
}

impl Parser {
    pub fn new(num_images: usize) -> Self {
        Self {
            num_images,
            mode: ParserMode::OutsideBlock,
            tag: String::new(),
            tag_start: 0,
            offset: 0,
            body: String::new(),
            body_start: 0,
            outside: String::new(),
            summary_open: false,
            pending_directive: None,
            last_directive: None,
            failed: None,
        }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn mode(&self) -> &ParserMode {
        &self.mode
    }

    /// Characters of a tag that has started but not yet completed.
    pub fn pending_tag(&self) -> &str {
        &self.tag
    }

    /// Bytes consumed so far.
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn in_summary(&self) -> bool {
        self.summary_open
    }

    /// Directive of the most recently closed plan block.
    pub fn last_directive(&self) -> Option<&PlanDirective> {
        self.last_directive.as_ref()
    }

    /// True inside a focus block body, i.e. no closing tag has started.
    pub fn in_focus_body(&self) -> Option<&FocusImages> {
        match &self.mode {
            ParserMode::InFocus(images) if self.tag.is_empty() => Some(images),
            _ => None,
        }
    }

    pub fn feed(&mut self, text: &str) -> Result<Vec<BlockEvent>, FormatError> {
        if let Some(err) = &self.failed {
            return Err(FormatError::Poisoned(Box::new(err.clone())));
        }
        let mut events = Vec::new();
        for c in text.chars() {
            if let Err(err) = self.push_char(c, &mut events) {
                self.failed = Some(err.clone());
                return Err(err);
            }
        }
        Ok(events)
    }

    /// Ends the input. Fails if a block or tag is still open.
    pub fn finish(&mut self) -> Result<Vec<BlockEvent>, FormatError> {
        if let Some(err) = &self.failed {
            return Err(FormatError::Poisoned(Box::new(err.clone())));
        }
        if !self.tag.is_empty() {
            return Err(FormatError::UnfinishedTag { tag: self.tag.clone() });
        }
        if let Some(open) = self.mode.closer().map(|_| self.mode.block_name()) {
            return Err(FormatError::UnclosedBlock { open });
        }
        let mut events = Vec::new();
        self.close_summary(self.offset, &mut events);
        self.mode = ParserMode::Terminated;
        Ok(events)
    }

    /// Shortest text that brings the parser back outside every block.
    ///
    /// A plan without a directive is closed with `fallback`. A half-written
    /// opening tag is completed and its block closed immediately.
    pub fn closing_continuation(&self, fallback: &PlanDirective) -> String {
        match &self.mode {
            ParserMode::Terminated => String::new(),
            ParserMode::OutsideBlock if self.tag.is_empty() => String::new(),
            ParserMode::OutsideBlock => self.complete_opener(fallback),
            ParserMode::InPlan if self.tag.is_empty() => {
                if matches!(find_directive(&self.body, self.body_start, self.num_images), Some(Ok(_))) {
                    CLOSE_PLAN.to_string()
                } else {
                    let sep = match self.body.chars().last() {
                        Some(c) if !c.is_whitespace() => " ",
                        _ => "",
                    };
                    format!("{sep}{}{CLOSE_PLAN}", fallback.text())
                }
            }
            mode => {
                let closer = mode.closer().expect("inside a block");
                closer[self.tag.len()..].to_string()
            }
        }
    }

    fn complete_opener(&self, fallback: &PlanDirective) -> String {
        let tag = self.tag.as_str();
        if tag.len() > 1 && OPEN_PLAN.starts_with(tag) {
            return format!("{}{}{CLOSE_PLAN}", &OPEN_PLAN[tag.len()..], fallback.text());
        }
        if tag.len() > 1 && (OPEN_FOCUS_PREFIX.starts_with(tag) || tag.starts_with(OPEN_FOCUS_PREFIX)) {
            let preferred = match fallback {
                PlanDirective::NextFocus(images) => images.as_slice()[0],
                PlanDirective::End => 1,
            };
            let rest = tag.strip_prefix(OPEN_FOCUS_PREFIX);
            let head = if rest.is_some() { String::new() } else { OPEN_FOCUS_PREFIX[tag.len()..].to_string() };
            let inner = self.complete_focus_inner(rest.unwrap_or(""), preferred);
            return format!("{head}{inner}>{CLOSE_FOCUS}");
        }
        format!("{}{CLOSE_ANSWER}", &OPEN_ANSWER[tag.len()..])
    }

    /// Completion of a viable focus tag interior, without the closing `>`.
    fn complete_focus_inner(&self, rest: &str, preferred: ImageIndex) -> String {
        let (done, current) = match rest.rsplit_once(',') {
            Some((first, cur)) => (parse_image(first), cur),
            None => (None, rest),
        };
        let pick = || {
            let ok = |k: ImageIndex| k >= 1 && k <= self.num_images && Some(k) != done;
            if ok(preferred) {
                preferred
            } else {
                (1..=self.num_images).find(|&k| ok(k)).unwrap_or(1)
            }
        };
        match current.strip_prefix('I') {
            None => format!("I{}", pick()),
            Some("") => pick().to_string(),
            Some(digits) => {
                let v: usize = digits.parse().unwrap_or(0);
                if Some(v) == done {
                    "0".to_string()
                } else {
                    String::new()
                }
            }
        }
    }

    fn push_char(&mut self, c: char, events: &mut Vec<BlockEvent>) -> Result<(), FormatError> {
        let start = self.offset;
        self.offset += c.len_utf8();
        if !self.tag.is_empty() {
            self.tag.push(c);
            return self.advance_tag(events);
        }
        if self.mode == ParserMode::Terminated {
            if c.is_whitespace() {
                return Ok(());
            }
            return Err(FormatError::AfterTermination { offset: start });
        }
        if c == '<' {
            if self.mode == ParserMode::InPlan {
                match find_directive(&self.body, self.body_start, self.num_images) {
                    None => return Err(FormatError::MissingDirective { offset: start }),
                    Some(Err(e)) => return Err(e),
                    Some(Ok(found)) => self.pending_directive = Some(found),
                }
            }
            self.tag_start = start;
            self.tag.push(c);
            return self.advance_tag(events);
        }
        match self.mode {
            ParserMode::OutsideBlock => {
                self.outside.push(c);
                if c == ':' && !self.summary_open {
                    if let Some(lead) = self.outside.strip_suffix(SUMMARY_MARKER) {
                        if lead.trim().is_empty() {
                            self.summary_open = true;
                            let span = self.offset - SUMMARY_MARKER.len()..self.offset;
                            events.push(BlockEvent::new(EventKind::BlockStart(BlockKind::Summary), span));
                        }
                    }
                }
            }
            ParserMode::InPlan | ParserMode::InAnswer => self.body.push(c),
            ParserMode::InFocus(_) | ParserMode::Terminated => {}
        }
        Ok(())
    }

    fn advance_tag(&mut self, events: &mut Vec<BlockEvent>) -> Result<(), FormatError> {
        let offset = self.tag_start;
        let status = match self.mode.closer() {
            Some(closer) => {
                if self.tag == closer {
                    TagStatus::Complete(match self.mode {
                        ParserMode::InPlan => Tag::ClosePlan,
                        ParserMode::InFocus(_) => Tag::CloseFocus,
                        _ => Tag::CloseAnswer,
                    })
                } else if closer.starts_with(self.tag.as_str()) {
                    TagStatus::Partial
                } else {
                    return Err(self.divergence(offset));
                }
            }
            None => {
                if self.tag.starts_with("</") {
                    return Err(FormatError::UnmatchedClose { offset, tag: self.tag.clone() });
                }
                classify_opener(&self.tag, offset, self.num_images)?
            }
        };
        let TagStatus::Complete(tag) = status else { return Ok(()) };
        let span = self.tag_start..self.offset;
        self.tag.clear();
        match tag {
            Tag::OpenPlan | Tag::OpenFocus(_) | Tag::OpenAnswer => {
                self.close_summary(span.start, events);
                self.outside.clear();
                self.body.clear();
                self.body_start = span.end;
                let kind = match tag {
                    Tag::OpenPlan => {
                        self.mode = ParserMode::InPlan;
                        BlockKind::Plan
                    }
                    Tag::OpenAnswer => {
                        self.mode = ParserMode::InAnswer;
                        BlockKind::Answer
                    }
                    Tag::OpenFocus(images) => {
                        self.mode = ParserMode::InFocus(images.clone());
                        BlockKind::Focus(images)
                    }
                    _ => unreachable!(),
                };
                let mismatch = match (&kind, self.last_directive.take()) {
                    (BlockKind::Focus(actual), Some(PlanDirective::NextFocus(planned)))
                        if actual.sorted() != planned.sorted() =>
                    {
                        Some(EventKind::Mismatch { planned: planned.sorted(), actual: actual.sorted() })
                    }
                    (BlockKind::Focus(_), _) => None,
                    (_, previous) => {
                        self.last_directive = previous;
                        None
                    }
                };
                events.push(BlockEvent::new(EventKind::BlockStart(kind), span.clone()));
                if let Some(m) = mismatch {
                    events.push(BlockEvent::new(m, span));
                }
            }
            Tag::ClosePlan => {
                let (directive, dspan) = self.pending_directive.take().expect("checked when the tag opened");
                events.push(BlockEvent::new(EventKind::Directive(directive.clone()), dspan));
                events.push(BlockEvent::new(EventKind::BlockEnd(BlockKind::Plan), span));
                self.last_directive = Some(directive);
                self.mode = ParserMode::OutsideBlock;
            }
            Tag::CloseFocus => {
                let ParserMode::InFocus(images) = std::mem::replace(&mut self.mode, ParserMode::OutsideBlock) else {
                    unreachable!()
                };
                events.push(BlockEvent::new(EventKind::BlockEnd(BlockKind::Focus(images)), span));
            }
            Tag::CloseAnswer => {
                let text = self.body.trim().to_string();
                events.push(BlockEvent::new(EventKind::AnswerText(text), self.body_start..span.start));
                events.push(BlockEvent::new(EventKind::BlockEnd(BlockKind::Answer), span));
                self.mode = ParserMode::Terminated;
            }
        }
        Ok(())
    }

    fn divergence(&self, offset: usize) -> FormatError {
        let tag = self.tag.clone();
        let open = self.mode.block_name();
        if OPENERS.iter().any(|o| o.starts_with(tag.as_str())) || tag.starts_with(OPEN_FOCUS_PREFIX) {
            FormatError::NestedOpen { offset, open, tag }
        } else if CLOSERS.iter().any(|c| c.starts_with(tag.as_str())) {
            FormatError::MismatchedClose { offset, expected: open, tag }
        } else {
            FormatError::MalformedTag { offset, tag }
        }
    }

    fn close_summary(&mut self, at: usize, events: &mut Vec<BlockEvent>) {
        if self.summary_open {
            self.summary_open = false;
            events.push(BlockEvent::new(EventKind::BlockEnd(BlockKind::Summary), at..at));
        }
    }
}

fn parse_image(s: &str) -> Option<ImageIndex> {
    s.strip_prefix('I')?.parse().ok()
}

fn classify_opener(tag: &str, offset: usize, num_images: usize) -> Result<TagStatus, FormatError> {
    if tag == OPEN_PLAN {
        return Ok(TagStatus::Complete(Tag::OpenPlan));
    }
    if tag == OPEN_ANSWER {
        return Ok(TagStatus::Complete(Tag::OpenAnswer));
    }
    if let Some(rest) = tag.strip_prefix(OPEN_FOCUS_PREFIX) {
        return classify_focus(rest, offset, num_images);
    }
    if OPENERS.iter().any(|o| o.starts_with(tag)) {
        return Ok(TagStatus::Partial);
    }
    Err(FormatError::MalformedTag { offset, tag: tag.to_string() })
}

/// Classifies the interior of `<focus:...` with eager range checks.
fn classify_focus(rest: &str, offset: usize, num_images: usize) -> Result<TagStatus, FormatError> {
    let malformed = || FormatError::MalformedTag { offset, tag: format!("{OPEN_FOCUS_PREFIX}{rest}") };
    let out_of_range = |index| FormatError::IndexOutOfRange { offset, index, num_images };
    if num_images == 0 {
        return Err(out_of_range(0));
    }
    let mut images: Vec<ImageIndex> = Vec::with_capacity(2);
    let mut digits: Option<String> = None;
    let mut chars = rest.chars().peekable();
    while let Some(c) = chars.next() {
        match (&mut digits, c) {
            (None, 'I') => digits = Some(String::new()),
            (None, _) => return Err(malformed()),
            (Some(d), '0'..='9') => {
                if d.is_empty() && c == '0' {
                    return Err(out_of_range(0));
                }
                d.push(c);
                let value = d.parse::<usize>().unwrap_or(usize::MAX);
                if value > num_images {
                    return Err(out_of_range(value));
                }
                if let Some(&first) = images.first() {
                    if value == first && value.saturating_mul(10) > num_images {
                        return Err(malformed());
                    }
                }
            }
            (Some(d), ',' | '>') => {
                if d.is_empty() {
                    return Err(malformed());
                }
                let value: usize = d.parse().expect("digits checked");
                if images.contains(&value) {
                    return Err(malformed());
                }
                images.push(value);
                digits = None;
                if c == '>' {
                    if chars.peek().is_some() {
                        return Err(malformed());
                    }
                    let images = FocusImages::new(images).map_err(|_| malformed())?;
                    return Ok(TagStatus::Complete(Tag::OpenFocus(images)));
                }
                if images.len() == 2 || num_images < 2 {
                    return Err(FormatError::TooManyImages { offset });
                }
            }
            (Some(_), _) => return Err(malformed()),
        }
    }
    Ok(TagStatus::Partial)
}
