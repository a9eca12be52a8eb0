//! One-call episode setup shared by the CLI and the test suites.

use crate::controller::{run_episode, BudgetConfig, ControllerError, EpisodeResult, EpisodeSpec, Greedy, Sampler, Scripted, TokenPolicy};
use crate::gating::GateConfig;
use crate::model::{Model, Preset, Tokenizer};
use crate::prompt::{build_prompt, PromptSpec, DEFAULT_TEMPLATE};
use crate::trace::{EpisodeMode, Seeds};

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub preset: Preset,
    /// Model weight seed; also seeds the image tokens.
    pub seed: u64,
    pub mode: EpisodeMode,
    pub lambda: f64,
    pub budget: BudgetConfig,
    pub num_images: usize,
    pub image_tokens: usize,
    pub template: String,
    /// Replay this text instead of decoding from the model.
    pub script: Option<String>,
    /// Zero means greedy.
    pub temperature: f64,
    pub sampling_seed: u64,
    pub record_raw: bool,
    pub tag: Option<String>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            seed: 0,
            mode: EpisodeMode::PulseFocus,
            lambda: 2.0,
            budget: BudgetConfig::default(),
            num_images: 6,
            image_tokens: 16,
            template: DEFAULT_TEMPLATE.to_string(),
            script: None,
            temperature: 0.0,
            sampling_seed: 0,
            record_raw: false,
            tag: None,
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), ControllerError> {
        GateConfig::new(self.lambda)?;
        self.budget.validate().map_err(ControllerError::Budget)?;
        if self.mode == EpisodeMode::External {
            return Err(ControllerError::Budget("mode `external` cannot be run".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ControllerError::Budget(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model, ControllerError> {
        Ok(Model::new(self.preset.config(Tokenizer::default().vocab_size(), self.seed))?)
    }

    pub fn episode(&self) -> Result<EpisodeSpec, ControllerError> {
        self.validate()?;
        let tokenizer = Tokenizer::default();
        let prompt = PromptSpec {
            template: self.template.clone(),
            num_images: self.num_images,
            image_tokens: self.image_tokens,
            seed: self.seed,
        };
        let (tokens, layout) = build_prompt(&prompt, &tokenizer);
        let mut spec = EpisodeSpec::new(tokens, layout, self.mode);
        spec.gate = GateConfig::new(self.lambda)?;
        spec.budget = self.budget;
        spec.record_raw = self.record_raw;
        spec.seeds = Seeds { model: Some(self.seed), sampling: Some(self.sampling_seed), prompt: Some(self.seed) };
        spec.tag = self.tag.clone();
        Ok(spec)
    }

    pub fn policy(&self) -> Box<dyn TokenPolicy> {
        match (&self.script, self.temperature) {
            (Some(text), _) => Box::new(Scripted::from_text(text)),
            (None, t) if t == 0.0 => Box::new(Greedy),
            (None, t) => Box::new(Sampler::new(t, self.sampling_seed)),
        }
    }

    pub fn run(&self) -> Result<EpisodeResult, ControllerError> {
        let spec = self.episode()?;
        let model = self.model()?;
        run_episode(&model, &spec, self.policy().as_mut())
    }
}
