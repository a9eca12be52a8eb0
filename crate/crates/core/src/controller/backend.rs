use crate::gating::{build_gate, FocusSet, GateConfig};
use crate::layout::TokenLayout;
use crate::model::{DecodeSession, HeadRow, Model, TokenId};
use crate::trace::StepMass;

use super::ControllerError;

/// Gate to apply on a decode step.
#[derive(Debug, Clone, Copy)]
pub struct GateRequest<'a> {
    pub focus: &'a FocusSet,
    pub config: &'a GateConfig,
}

/// Something that can produce logits and attention for an episode.
pub trait EpisodeBackend: Sync {
    fn start<'a>(
        &'a self,
        prompt: &[TokenId],
        layout: &TokenLayout,
    ) -> Result<Box<dyn BackendSession + 'a>, ControllerError>;

    fn model_digest(&self) -> Option<String> {
        None
    }

    fn model_seed(&self) -> Option<u64> {
        None
    }

    fn selected_layers(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// A live sequence. The current logits and attention belong to the forward
/// position that will produce the next token.
pub trait BackendSession {
    fn current_len(&self) -> usize;

    /// Longest sequence the session can hold.
    fn capacity(&self) -> usize;

    fn logits(&self) -> &[f64];

    fn attention(&self, raw: bool) -> (StepMass, Option<Vec<HeadRow>>);

    fn step(&mut self, token: TokenId, gate: Option<GateRequest<'_>>) -> Result<(), ControllerError>;
}

impl EpisodeBackend for Model {
    fn start<'a>(
        &'a self,
        prompt: &[TokenId],
        layout: &TokenLayout,
    ) -> Result<Box<dyn BackendSession + 'a>, ControllerError> {
        Ok(Box::new(ModelSession(self.prefill(prompt, layout)?)))
    }

    fn model_digest(&self) -> Option<String> {
        Some(self.config().digest())
    }

    fn model_seed(&self) -> Option<u64> {
        Some(self.config().rng_seed)
    }

    fn selected_layers(&self) -> Vec<usize> {
        self.recording().layers.clone()
    }
}

struct ModelSession<'m>(DecodeSession<'m>);

impl BackendSession for ModelSession<'_> {
    fn current_len(&self) -> usize {
        self.0.current_len()
    }

    fn capacity(&self) -> usize {
        self.0.model().config().max_seq_len
    }

    fn logits(&self) -> &[f64] {
        self.0.last_logits()
    }

    fn attention(&self, raw: bool) -> (StepMass, Option<Vec<HeadRow>>) {
        let a = self.0.last_attention();
        (StepMass::Row(a.reduced.clone()), raw.then(|| a.rows.clone()))
    }

    fn step(&mut self, token: TokenId, gate: Option<GateRequest<'_>>) -> Result<(), ControllerError> {
        let gate = match gate {
            Some(g) => Some(build_gate(self.0.layout(), g.focus, g.config, self.0.current_len() + 1)?),
            None => None,
        };
        self.0.decode_step(token, gate.as_ref())?;
        Ok(())
    }
}
