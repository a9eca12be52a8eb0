//! In-memory attention traces.

use serde::{Deserialize, Serialize};

use crate::layout::{ImageIndex, TokenLayout};
use crate::model::{HeadRow, TokenId};

/// How an episode was decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpisodeMode {
    #[serde(rename = "pulsefocus")]
    PulseFocus,
    #[serde(rename = "plan-focus-nogate")]
    PlanFocusNoGating,
    #[serde(rename = "free-cot")]
    FreeCot,
    /// Produced outside this crate, e.g. recorded from another model.
    #[serde(rename = "external", other)]
    External,
}

impl EpisodeMode {
    pub fn name(self) -> &'static str {
        match self {
            EpisodeMode::PulseFocus => "pulsefocus",
            EpisodeMode::PlanFocusNoGating => "plan-focus-nogate",
            EpisodeMode::FreeCot => "free-cot",
            EpisodeMode::External => "external",
        }
    }

    pub fn uses_grammar(self) -> bool {
        matches!(self, EpisodeMode::PulseFocus | EpisodeMode::PlanFocusNoGating)
    }
}

impl std::str::FromStr for EpisodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pulsefocus" => Ok(EpisodeMode::PulseFocus),
            "plan-focus-nogate" => Ok(EpisodeMode::PlanFocusNoGating),
            "free-cot" => Ok(EpisodeMode::FreeCot),
            other => Err(format!("unknown mode `{other}` (expected pulsefocus, plan-focus-nogate or free-cot)")),
        }
    }
}

/// Grammar region a step's token was decided in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    Outside,
    Plan,
    Focus,
    Summary,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub mode: BlockMode,
    /// Focused images, present for `Focus` steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<Vec<ImageIndex>>,
}

impl Annotation {
    pub fn new(mode: BlockMode) -> Self {
        Self { mode, focus: None }
    }

    pub fn focus(images: Vec<ImageIndex>) -> Self {
        Self { mode: BlockMode::Focus, focus: Some(images) }
    }
}

/// Attention recorded for one step: the reduced row, or precomputed masses.
#[derive(Debug, Clone, PartialEq)]
pub enum StepMass {
    Row(Vec<f64>),
    Mass { images: Vec<f64>, text: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub index: usize,
    pub token_id: Option<TokenId>,
    /// Text this token contributed to the transcript (may be empty for a
    /// partial UTF-8 sequence).
    pub token: String,
    pub annotation: Option<Annotation>,
    pub injected: bool,
    pub gated: bool,
    pub attention: StepMass,
    /// Selected-layer rows, kept only when raw retention is on.
    pub raw: Option<Vec<HeadRow>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    #[serde(default)]
    pub model: Option<u64>,
    #[serde(default)]
    pub sampling: Option<u64>,
    #[serde(default)]
    pub prompt: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetadata {
    pub lambda: f64,
    pub mode: EpisodeMode,
    pub seeds: Seeds,
    pub model_digest: Option<String>,
    pub selected_layers: Vec<usize>,
    /// Grouping key for aggregate reports, e.g. a task type.
    pub tag: Option<String>,
}

impl Default for TraceMetadata {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            mode: EpisodeMode::External,
            seeds: Seeds::default(),
            model_digest: None,
            selected_layers: Vec::new(),
            tag: None,
        }
    }
}

/// Per-step attention of one decoded sequence.
///
/// Step `k` attends over `layout.total_len() + k` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layout: TokenLayout,
    pub metadata: TraceMetadata,
    pub steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn new(layout: TokenLayout, metadata: TraceMetadata) -> Self {
        Self { layout, metadata, steps: Vec::new() }
    }

    pub fn num_images(&self) -> usize {
        self.layout.num_images()
    }

    pub fn prompt_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn has_annotations(&self) -> bool {
        self.steps.iter().any(|s| s.annotation.is_some())
    }

    pub fn has_rows(&self) -> bool {
        self.steps.iter().any(|s| matches!(s.attention, StepMass::Row(_)))
    }

    pub fn has_raw(&self) -> bool {
        !self.steps.is_empty() && self.steps.iter().all(|s| s.raw.is_some())
    }
}
