//! Seeded generators: planted-bias traces, grammar-valid transcripts,
//! randomized scripts and a mass-only backend for cheap controller runs.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{BackendSession, ControllerError, EpisodeBackend, GateRequest};
use crate::format::{FocusImages, PlanDirective, Section};
use crate::layout::TokenLayout;
use crate::model::{HeadRow, TokenId};
use crate::trace::{AttentionTrace, EpisodeMode, Seeds, StepMass, TraceMetadata, TraceStep};

pub const TASK_TAGS: [&str; 4] = ["counting", "ordering", "matching", "retrieval"];

/// Shape of generated traces. Image `j` receives a share of the image mass
/// proportional to `beta^j`, jittered by a factor in `1 ± noise`.
#[derive(Debug, Clone)]
pub struct PlantedBias {
    pub beta: f64,
    pub noise: f64,
    pub min_images: usize,
    pub max_images: usize,
    pub image_len: usize,
    pub text_len: usize,
    pub steps: usize,
}

impl PlantedBias {
    pub fn new(beta: f64) -> Self {
        Self { beta, noise: 0.2, min_images: 2, max_images: 6, image_len: 4, text_len: 6, steps: 24 }
    }

    /// Equal mass on every image, no jitter, fixed text share and a fixed
    /// image count, so every position sees the same per-image mass.
    pub fn uniform() -> Self {
        Self { beta: 1.0, noise: 0.0, min_images: 6, ..Self::new(1.0) }
    }

    pub fn trace(&self, index: usize, seed: u64) -> AttentionTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = rng.random_range(self.min_images..=self.max_images);
        let mut builder = TokenLayout::builder().text(self.text_len);
        for _ in 0..n {
            builder = builder.image(self.image_len);
        }
        let layout = builder.text(self.text_len / 2).build();
        let metadata = TraceMetadata {
            mode: EpisodeMode::External,
            seeds: Seeds { prompt: Some(seed), ..Seeds::default() },
            tag: Some(TASK_TAGS[index % TASK_TAGS.len()].to_string()),
            ..TraceMetadata::default()
        };
        let mut trace = AttentionTrace::new(layout, metadata);
        for k in 0..self.steps {
            let text_share = if self.noise == 0.0 { 0.3 } else { rng.random_range(0.2..0.4) };
            let weights: Vec<f64> = (1..=n)
                .map(|j| self.beta.powi(j as i32) * (1.0 + self.noise * rng.random_range(-1.0..1.0)))
                .collect();
            let total: f64 = weights.iter().sum();
            let images: Vec<f64> = weights.iter().map(|w| (1.0 - text_share) * w / total).collect();
            let row = spread(&trace.layout, &images, text_share, trace.layout.total_len() + k);
            trace.steps.push(TraceStep {
                index: k,
                token_id: None,
                token: String::new(),
                annotation: None,
                injected: false,
                gated: false,
                attention: StepMass::Row(row),
                raw: None,
            });
        }
        trace
    }

    pub fn traces(&self, count: usize, seed: u64) -> Vec<AttentionTrace> {
        (0..count).map(|i| self.trace(i, seed)).collect()
    }
}

/// A row of length `len` with the given per-image masses spread evenly over
/// each image span and `text` spread evenly over every other position.
pub fn spread(layout: &TokenLayout, images: &[f64], text: f64, len: usize) -> Vec<f64> {
    let image_positions: usize = layout.image_spans().map(|(_, s)| s.len()).sum();
    let text_positions = len - image_positions;
    let mut row = vec![text / text_positions as f64; len];
    for (j, span) in layout.image_spans() {
        let each = images[j - 1] / span.len() as f64;
        row[span].iter_mut().for_each(|r| *r = each);
    }
    row
}

const WORDS: &[&str] = &[
    " the", " car", " cars", " image", " is", " one", " two", " visible", " no", " road", " red", " parked", ",",
    ".", " I", " see", " é", " 中",
];

fn words(rng: &mut ChaCha8Rng, count: std::ops::Range<usize>) -> String {
    let count = if count.len() > 1 { rng.random_range(count) } else { count.start };
    (0..count).map(|_| *WORDS.choose(rng).expect("non-empty")).collect()
}

fn random_images(rng: &mut ChaCha8Rng, n: usize) -> FocusImages {
    let a = rng.random_range(1..=n);
    if n >= 2 && rng.random_bool(0.25) {
        let mut b = rng.random_range(1..=n);
        while b == a {
            b = rng.random_range(1..=n);
        }
        FocusImages::new(vec![a, b]).expect("distinct")
    } else {
        FocusImages::single(a)
    }
}

fn directive(rng: &mut ChaCha8Rng, n: usize) -> PlanDirective {
    if rng.random_bool(0.2) {
        PlanDirective::End
    } else {
        PlanDirective::NextFocus(random_images(rng, n))
    }
}

/// A grammar-valid transcript over `n >= 1` images, as sections.
pub fn random_sections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Section> {
    let mut sections = Vec::new();
    let blocks = rng.random_range(0..8);
    let mut last_text = false;
    for _ in 0..blocks {
        if !last_text && rng.random_bool(0.4) {
            let ws = ["\n", " ", "\n\n", " Summary: so far"];
            sections.push(Section::Text(format!("{}{}", ws.choose(rng).unwrap(), words(rng, 0..4))));
            last_text = true;
            continue;
        }
        last_text = false;
        if rng.random_bool(0.5) {
            let body = words(rng, 0..12);
            let sep = if body.is_empty() { "" } else { " " };
            let trail = ["", " ", "\n"].choose(rng).unwrap();
            sections.push(Section::Plan(format!("{body}{sep}{}{trail}", directive(rng, n).text())));
        } else {
            sections.push(Section::Focus { images: random_images(rng, n), body: words(rng, 0..12) });
        }
    }
    if rng.random_bool(0.6) {
        if !last_text && rng.random_bool(0.5) {
            sections.push(Section::Text("\nSummary: putting the observations together.\n".into()));
        }
        sections.push(Section::Answer(format!(" {} ", ["A", "B", "C", "(D)"].choose(rng).unwrap())));
        if rng.random_bool(0.3) {
            sections.push(Section::Text("\n".into()));
        }
    }
    sections
}

/// Script for a randomized episode: mostly well-formed cycles, with
/// over-long blocks, missing directives, missing `END` and the occasional
/// grammar slip mixed in.
pub fn random_script(rng: &mut ChaCha8Rng, n: usize) -> String {
    let mut s = String::new();
    let cycles = rng.random_range(0..=16);
    for c in 0..cycles {
        let plan_len = if rng.random_bool(0.15) { rng.random_range(240..=320) } else { rng.random_range(0..40) };
        s.push_str("<plan>");
        s.push_str(&words(rng, plan_len..plan_len + 1));
        if !rng.random_bool(0.1) {
            let d = if c + 1 == cycles && rng.random_bool(0.5) { PlanDirective::End } else { directive(rng, n) };
            s.push(' ');
            s.push_str(&d.text());
        }
        s.push_str("</plan>\n");
        let focus_len = if rng.random_bool(0.15) { rng.random_range(180..=260) } else { rng.random_range(0..40) };
        s.push_str(&random_images(rng, n).open_tag());
        s.push_str(&words(rng, focus_len..focus_len + 1));
        if rng.random_bool(0.02) {
            s.push_str("<plan>");
        }
        s.push_str("</focus>\n");
    }
    if rng.random_bool(0.5) {
        s.push_str("Summary: done.\n<answer> B </answer>");
    }
    s
}

/// Backend that skips the transformer: per-image masses are drawn from a
/// seeded stream and gated in closed form. Logits are all zero, so it is
/// only useful with policies that ignore them.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub vocab_size: usize,
    pub capacity: usize,
    pub seed: u64,
}

impl SyntheticBackend {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self { vocab_size, capacity: 1 << 20, seed }
    }
}

struct SyntheticSession {
    rng: ChaCha8Rng,
    num_images: usize,
    len: usize,
    capacity: usize,
    logits: Vec<f64>,
    images: Vec<f64>,
    text: f64,
}

impl SyntheticSession {
    fn draw(&mut self, gate: Option<GateRequest<'_>>) {
        let text = self.rng.random_range(0.1..0.5);
        let weights: Vec<f64> = (0..self.num_images).map(|_| self.rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut images: Vec<f64> = weights.iter().map(|w| (1.0 - text) * w / total).collect();
        let mut text = text;
        if let Some(g) = gate {
            let keep = (-g.config.lambda()).exp();
            let suppressed: f64 = (1..=self.num_images).filter(|j| !g.focus.contains(*j)).map(|j| images[j - 1]).sum();
            let z = 1.0 - (1.0 - keep) * suppressed;
            for (i, a) in images.iter_mut().enumerate() {
                *a = if g.focus.contains(i + 1) { *a / z } else { *a * keep / z };
            }
            text /= z;
        }
        self.images = images;
        self.text = text;
    }
}

impl EpisodeBackend for SyntheticBackend {
    fn start<'a>(
        &'a self,
        prompt: &[TokenId],
        layout: &TokenLayout,
    ) -> Result<Box<dyn BackendSession + 'a>, ControllerError> {
        let mut s = SyntheticSession {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            num_images: layout.num_images(),
            len: prompt.len(),
            capacity: self.capacity,
            logits: vec![0.0; self.vocab_size],
            images: Vec::new(),
            text: 1.0,
        };
        s.draw(None);
        Ok(Box::new(s))
    }
}

impl BackendSession for SyntheticSession {
    fn current_len(&self) -> usize {
        self.len
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn attention(&self, _raw: bool) -> (StepMass, Option<Vec<HeadRow>>) {
        (StepMass::Mass { images: self.images.clone(), text: self.text }, None)
    }

    fn step(&mut self, _token: TokenId, gate: Option<GateRequest<'_>>) -> Result<(), ControllerError> {
        self.len += 1;
        self.draw(gate);
        Ok(())
    }
}
