//! The plan/focus output grammar.
//!
//! ```text
//! transcript  ::= { text | block } [ trailing-ws ]
//! block       ::= plan | focus | answer
//! plan        ::= "<plan>" plan-body "</plan>"
//! plan-body   ::= body-text directive ws*          (directive is the final sentence)
//! directive   ::= "Next focus: " image [ " and " image ] | "END"
//! focus       ::= "<focus:" image [ "," image ] ">" body-text "</focus>"
//! answer      ::= "<answer>" body-text "</answer>"
//! image       ::= "I" index                        (index in 1..=N, no leading zeros)
//! body-text   ::= { any character except "<" }
//! text        ::= { any character except "<" }     (may start with "Summary:")
//! ```
//!
//! Blocks never nest. A directive must be preceded by the start of the body,
//! whitespace or sentence punctuation. Nothing but whitespace may follow
//! `</answer>`. Tags and `END` are case-sensitive.
//!
//! [`Parser`] consumes text incrementally and emits [`BlockEvent`]s; tags
//! may be split across chunks. [`parse`] / [`serialize`] convert between a
//! transcript and its [`Section`]s, and [`validate_transcript`] produces a
//! findings report.

mod document;
mod parser;
mod validate;

use std::fmt;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use document::{parse, serialize, Document, Section};
pub use parser::{Parser, ParserMode};
pub use validate::{validate_transcript, Finding, FindingKind, Severity, ValidationReport};

use crate::layout::ImageIndex;

pub const OPEN_PLAN: &str = "<plan>";
pub const CLOSE_PLAN: &str = "</plan>";
pub const OPEN_FOCUS_PREFIX: &str = "<focus:";
pub const CLOSE_FOCUS: &str = "</focus>";
pub const OPEN_ANSWER: &str = "<answer>";
pub const CLOSE_ANSWER: &str = "</answer>";
pub const SUMMARY_MARKER: &str = "Summary:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("malformed tag `{tag}` at byte {offset}")]
    MalformedTag { offset: usize, tag: String },
    #[error("image index {index} at byte {offset} is out of range 1..={num_images}")]
    IndexOutOfRange { offset: usize, index: usize, num_images: usize },
    #[error("focus tag at byte {offset} references more than 2 images")]
    TooManyImages { offset: usize },
    #[error("closing tag `{tag}` at byte {offset} has no matching open block")]
    UnmatchedClose { offset: usize, tag: String },
    #[error("tag `{tag}` at byte {offset} cannot close the open {expected} block")]
    MismatchedClose { offset: usize, expected: &'static str, tag: String },
    #[error("tag `{tag}` at byte {offset} opens a block inside an open {open} block")]
    NestedOpen { offset: usize, open: &'static str, tag: String },
    #[error("plan block closing at byte {offset} does not end with `Next focus: Ix` or `END`")]
    MissingDirective { offset: usize },
    #[error("malformed directive `{text}` at byte {offset}")]
    MalformedDirective { offset: usize, text: String },
    #[error("text after the answer block at byte {offset}")]
    AfterTermination { offset: usize },
    #[error("transcript ends inside an open {open} block")]
    UnclosedBlock { open: &'static str },
    #[error("transcript ends inside the partial tag `{tag}`")]
    UnfinishedTag { tag: String },
    #[error("parser already failed: {0}")]
    Poisoned(Box<FormatError>),
    #[error("invalid section sequence: {0}")]
    InvalidSequence(String),
}

impl FormatError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            FormatError::MalformedTag { offset, .. }
            | FormatError::IndexOutOfRange { offset, .. }
            | FormatError::TooManyImages { offset }
            | FormatError::UnmatchedClose { offset, .. }
            | FormatError::MismatchedClose { offset, .. }
            | FormatError::NestedOpen { offset, .. }
            | FormatError::MissingDirective { offset }
            | FormatError::MalformedDirective { offset, .. }
            | FormatError::AfterTermination { offset } => Some(*offset),
            FormatError::Poisoned(inner) => inner.offset(),
            _ => None,
        }
    }
}

/// The one or two images a focus block or directive refers to, in written order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<ImageIndex>", into = "Vec<ImageIndex>")]
pub struct FocusImages(Vec<ImageIndex>);

impl FocusImages {
    pub fn new(images: Vec<ImageIndex>) -> Result<Self, String> {
        match images.as_slice() {
            [a] if *a > 0 => Ok(Self(images)),
            [a, b] if *a > 0 && *b > 0 && a != b => Ok(Self(images)),
            _ => Err(format!("a focus references 1 or 2 distinct non-zero images, got {images:?}")),
        }
    }

    pub fn single(j: ImageIndex) -> Self {
        Self::new(vec![j]).expect("non-zero index")
    }

    pub fn as_slice(&self) -> &[ImageIndex] {
        &self.0
    }

    pub fn sorted(&self) -> Vec<ImageIndex> {
        let mut v = self.0.clone();
        v.sort_unstable();
        v
    }

    /// `<focus:I1>` or `<focus:I1,I2>`.
    pub fn open_tag(&self) -> String {
        let inner: Vec<String> = self.0.iter().map(|j| format!("I{j}")).collect();
        format!("{OPEN_FOCUS_PREFIX}{}>", inner.join(","))
    }
}

impl TryFrom<Vec<ImageIndex>> for FocusImages {
    type Error = String;

    fn try_from(v: Vec<ImageIndex>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<FocusImages> for Vec<ImageIndex> {
    fn from(f: FocusImages) -> Self {
        f.0
    }
}

impl fmt::Display for FocusImages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|j| format!("I{j}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    Plan,
    Focus(FocusImages),
    /// The untagged `Summary:` trailer.
    Summary,
    Answer,
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Plan => "plan",
            BlockKind::Focus(_) => "focus",
            BlockKind::Summary => "summary",
            BlockKind::Answer => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanDirective {
    NextFocus(FocusImages),
    End,
}

impl PlanDirective {
    /// Canonical spelling: `Next focus: I3`, `Next focus: I1 and I2` or `END`.
    pub fn text(&self) -> String {
        match self {
            PlanDirective::NextFocus(images) => {
                let parts: Vec<String> = images.as_slice().iter().map(|j| format!("I{j}")).collect();
                format!("Next focus: {}", parts.join(" and "))
            }
            PlanDirective::End => "END".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    BlockStart(BlockKind),
    BlockEnd(BlockKind),
    Directive(PlanDirective),
    /// Trimmed answer body, emitted just before the answer block closes.
    AnswerText(String),
    /// A focus block opened on different images than the preceding plan named.
    Mismatch { planned: Vec<ImageIndex>, actual: Vec<ImageIndex> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEvent {
    pub kind: EventKind,
    /// Byte range in the transcript.
    pub span: Range<usize>,
    /// Decode-step range, filled in by the controller.
    pub token_span: Option<Range<usize>>,
    /// Set when the text was injected by the controller rather than generated.
    pub injected: bool,
}

impl BlockEvent {
    pub(crate) fn new(kind: EventKind, span: Range<usize>) -> Self {
        Self { kind, span, token_span: None, injected: false }
    }
}

static NEXT_FOCUS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:^|[\s.,;:!?])(Next focus: I([0-9]+)(?: and I([0-9]+))?)$").expect("valid regex")
});
static END_DIRECTIVE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[\s.,;:!?])(END)$").expect("valid regex"));

/// Finds the directive that ends a plan body.
///
/// `base` is the byte offset of `body` in the transcript; returned spans are
/// absolute. `None` means the body has no directive at its end.
pub(crate) fn find_directive(
    body: &str,
    base: usize,
    num_images: usize,
) -> Option<Result<(PlanDirective, Range<usize>), FormatError>> {
    let trimmed = body.trim_end();
    if let Some(caps) = END_DIRECTIVE.captures(trimmed) {
        let m = caps.get(1).expect("group 1");
        return Some(Ok((PlanDirective::End, base + m.start()..base + m.end())));
    }
    let caps = NEXT_FOCUS.captures(trimmed)?;
    let whole = caps.get(1).expect("group 1");
    let span = base + whole.start()..base + whole.end();
    let malformed = || FormatError::MalformedDirective { offset: span.start, text: whole.as_str().to_string() };
    let mut images = Vec::with_capacity(2);
    for group in [2, 3] {
        let Some(digits) = caps.get(group) else { continue };
        let digits = digits.as_str();
        if digits.len() > 1 && digits.starts_with('0') {
            return Some(Err(malformed()));
        }
        let index = match digits.parse::<usize>() {
            Ok(i) if i >= 1 && i <= num_images => i,
            Ok(i) => return Some(Err(FormatError::IndexOutOfRange { offset: span.start, index: i, num_images })),
            Err(_) => {
                return Some(Err(FormatError::IndexOutOfRange { offset: span.start, index: usize::MAX, num_images }))
            }
        };
        images.push(index);
    }
    match FocusImages::new(images) {
        Ok(images) => Some(Ok((PlanDirective::NextFocus(images), span))),
        Err(_) => Some(Err(malformed())),
    }
}
