//! Seeded desk-scale decoder-only transformer.
//!
//! The model exists to give the gating and analytics code a real attention
//! computation to act on: pre-norm blocks (RMS norm without learned scale,
//! multi-head causal self-attention, GELU MLP), sinusoidal positions, and a
//! per-layer KV cache. All arithmetic is `f64`.
//!
//! # Weight initialization
//!
//! Weights are drawn from a ChaCha8 stream seeded with `rng_seed`, in this
//! order: token embedding (`vocab x hidden`), then per layer `wq`, `wk`, `wv`,
//! `wo` (`hidden x hidden`), `w_up` (`4*hidden x hidden`), `w_down`
//! (`hidden x 4*hidden`), then the unembedding (`vocab x hidden`). Each value
//! is `a * (2u - 1)` with `u = (next_u64 >> 11) * 2^-53`, where `a = 1` for the
//! embedding and `a = 1/sqrt(fan_in)` for every projection.
//!
//! Visual tokens are ordinary token ids placed in the image segments of a
//! [`TokenLayout`]; there is no image encoder.

mod config;
pub mod tokenizer;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ModelConfig, Preset};
pub use tokenizer::{Tokenizer, Utf8Stream};

use crate::gating::GateVector;
use crate::layout::TokenLayout;

pub type TokenId = u32;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{0} must be positive")]
    ZeroDimension(&'static str),
    #[error("hidden_dim {hidden_dim} is not divisible by num_heads {num_heads}")]
    HeadsDoNotDivide { hidden_dim: usize, num_heads: usize },
    #[error("prompt has {tokens} tokens but the layout covers {layout}")]
    LengthMismatch { tokens: usize, layout: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("gate covers {gate} positions but the step attends over {attended}")]
    GateLength { gate: usize, attended: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("recording layer {layer} does not exist in a {num_layers}-layer model")]
    RecordingLayer { layer: usize, num_layers: usize },
    #[error("recording head {head} does not exist with {num_heads} heads")]
    RecordingHead { head: usize, num_heads: usize },
}

/// Which attention rows are captured at each step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingConfig {
    pub layers: Vec<usize>,
    /// `None` records every head of each recorded layer.
    pub heads: Option<Vec<usize>>,
}

impl RecordingConfig {
    /// All heads at the 0%, 50% and 100% depth layers.
    pub fn diagnostic(num_layers: usize) -> Self {
        Self { layers: crate::analytics::select_diagnostic_layers(num_layers), heads: None }
    }
}

/// One captured post-softmax attention row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadRow {
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
}

/// Attention captured for one forward position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    pub attended_len: usize,
    pub rows: Vec<HeadRow>,
    /// Arithmetic mean of `rows`.
    pub reduced: Vec<f64>,
}

impl StepAttention {
    fn from_rows(attended_len: usize, rows: Vec<HeadRow>) -> Self {
        let mut reduced = vec![0.0; attended_len];
        for row in &rows {
            for (r, w) in reduced.iter_mut().zip(&row.weights) {
                *r += w;
            }
        }
        let n = rows.len().max(1) as f64;
        reduced.iter_mut().for_each(|r| *r /= n);
        Self { attended_len, rows, reduced }
    }

    pub fn selected_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        layers.dedup();
        layers
    }
}

/// Adds `offsets` to `scores` and replaces them with their softmax.
///
/// Uses max subtraction; the offsets are added before the max is taken so a
/// gated row is exactly `softmax(scores + offsets)`.
pub fn softmax_with_offsets(scores: &mut [f64], offsets: Option<&[f64]>) {
    if let Some(offsets) = offsets {
        for (s, d) in scores.iter_mut().zip(offsets) {
            *s += d;
        }
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

#[derive(Debug, Clone)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                scale * (2.0 * u - 1.0)
            })
            .collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

#[derive(Debug, Clone)]
struct Weights {
    embed: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn add_position(x: &mut [f64], pos: usize) {
    let d = x.len() as f64;
    for (i, v) in x.iter_mut().enumerate() {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d);
        *v += if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Immutable weights plus recording settings; share freely across sessions.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    recording: RecordingConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let h = config.hidden_dim;
        let m = config.mlp_dim();
        let proj = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let embed = Matrix::random(config.vocab_size, h, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random(h, h, proj(h), &mut rng),
                wk: Matrix::random(h, h, proj(h), &mut rng),
                wv: Matrix::random(h, h, proj(h), &mut rng),
                wo: Matrix::random(h, h, proj(h), &mut rng),
                w_up: Matrix::random(m, h, proj(h), &mut rng),
                w_down: Matrix::random(h, m, proj(m), &mut rng),
            })
            .collect();
        let unembed = Matrix::random(config.vocab_size, h, proj(h), &mut rng);
        let recording = RecordingConfig::diagnostic(config.num_layers);
        Ok(Self { config, weights: Weights { embed, layers, unembed }, recording })
    }

    pub fn with_recording(mut self, recording: RecordingConfig) -> Result<Self, ModelError> {
        for &layer in &recording.layers {
            if layer >= self.config.num_layers {
                return Err(ModelError::RecordingLayer { layer, num_layers: self.config.num_layers });
            }
        }
        for &head in recording.heads.iter().flatten() {
            if head >= self.config.num_heads {
                return Err(ModelError::RecordingHead { head, num_heads: self.config.num_heads });
            }
        }
        self.recording = recording;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn recording(&self) -> &RecordingConfig {
        &self.recording
    }

    /// First value of the token embedding; handy for determinism checks.
    pub fn first_weight(&self) -> f64 {
        self.weights.embed.data[0]
    }

    fn check_token(&self, id: TokenId) -> Result<(), ModelError> {
        if id as usize >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f64> {
        let mut x = self.weights.embed.row(token as usize).to_vec();
        add_position(&mut x, pos);
        x
    }

    fn recorded_heads(&self, layer: usize) -> Option<Vec<usize>> {
        if !self.recording.layers.contains(&layer) {
            return None;
        }
        Some(self.recording.heads.clone().unwrap_or_else(|| (0..self.config.num_heads).collect()))
    }

    fn mlp(&self, layer: &LayerWeights, x: &mut [f64]) {
        let h = rms_norm(x);
        let up: Vec<f64> = layer.w_up.matvec(&h).into_iter().map(gelu).collect();
        for (xi, d) in x.iter_mut().zip(layer.w_down.matvec(&up)) {
            *xi += d;
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.unembed.matvec(&rms_norm(x))
    }

    /// Multi-head attention of query `q` over the first `len` cached positions.
    ///
    /// Appends captured rows to `rows` for the heads listed in `record`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        layer_idx: usize,
        q: &[f64],
        keys: &[f64],
        values: &[f64],
        len: usize,
        gate: Option<&[f64]>,
        record: Option<&[usize]>,
        rows: &mut Vec<HeadRow>,
    ) -> Vec<f64> {
        let h = self.config.hidden_dim;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; h];
        let mut scores = vec![0.0; len];
        for head in 0..self.config.num_heads {
            let lo = head * hd;
            let qh = &q[lo..lo + hd];
            for (p, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[p * h + lo..p * h + lo + hd]) * scale;
            }
            softmax_with_offsets(&mut scores, gate);
            let oh = &mut out[lo..lo + hd];
            for (p, &w) in scores.iter().enumerate() {
                let vh = &values[p * h + lo..p * h + lo + hd];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += w * v;
                }
            }
            if record.is_some_and(|heads| heads.contains(&head)) {
                rows.push(HeadRow { layer: layer_idx, head, weights: scores.clone() });
            }
        }
        out
    }

    /// Causal forward over a whole sequence without any cache.
    ///
    /// Returns logits for every position. Used as the reference for the
    /// incremental path.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        let (logits, _) = self.forward_batch(tokens, None)?;
        Ok(logits)
    }

    fn forward_batch(
        &self,
        tokens: &[TokenId],
        mut cache: Option<&mut Vec<LayerCache>>,
    ) -> Result<(Vec<Vec<f64>>, StepAttention), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceOverflow { len: tokens.len(), max: self.config.max_seq_len });
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let n = tokens.len();
        let mut xs: Vec<Vec<f64>> = tokens.iter().enumerate().map(|(p, &t)| self.embed(t, p)).collect();
        let mut rows = Vec::new();
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x)).collect();
            let keys: Vec<f64> = normed.iter().flat_map(|h| layer.wk.matvec(h)).collect();
            let values: Vec<f64> = normed.iter().flat_map(|h| layer.wv.matvec(h)).collect();
            let record = self.recorded_heads(l);
            for (p, x) in xs.iter_mut().enumerate() {
                let q = layer.wq.matvec(&normed[p]);
                let last = p + 1 == n;
                let rec = if last { record.as_deref() } else { None };
                let attn = self.attend(l, &q, &keys, &values, p + 1, None, rec, &mut rows);
                for (xi, d) in x.iter_mut().zip(layer.wo.matvec(&attn)) {
                    *xi += d;
                }
                self.mlp(layer, x);
            }
            if let Some(cache) = cache.as_deref_mut() {
                cache[l] = LayerCache { keys, values };
            }
        }
        let logits = xs.iter().map(|x| self.logits(x)).collect();
        Ok((logits, StepAttention::from_rows(n, rows)))
    }

    /// Runs the prompt through the model and fills the KV cache.
    pub fn prefill(&self, tokens: &[TokenId], layout: &TokenLayout) -> Result<DecodeSession<'_>, ModelError> {
        if tokens.len() != layout.total_len() {
            return Err(ModelError::LengthMismatch { tokens: tokens.len(), layout: layout.total_len() });
        }
        let mut cache = vec![LayerCache::default(); self.config.num_layers];
        let (mut logits, attention) = self.forward_batch(tokens, Some(&mut cache))?;
        let last_logits = logits.pop().expect("non-empty prompt");
        Ok(DecodeSession {
            model: self,
            layout: layout.clone(),
            cache,
            len: tokens.len(),
            last_logits,
            last_attention: attention,
        })
    }
}

/// KV cache and position state for one sequence. Single-threaded; clone to fork.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model,
    layout: TokenLayout,
    cache: Vec<LayerCache>,
    len: usize,
    last_logits: Vec<f64>,
    last_attention: StepAttention,
}

impl<'m> DecodeSession<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    /// Number of positions in the KV cache.
    pub fn current_len(&self) -> usize {
        self.len
    }

    /// Logits of the most recent forward position (the prompt's last token after prefill).
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    pub fn last_attention(&self) -> &StepAttention {
        &self.last_attention
    }

    /// Appends `token` and runs one incremental forward step.
    ///
    /// The new position attends over `current_len() + 1` positions; a gate
    /// must cover exactly that many and is added to the logits of every head
    /// in every layer.
    pub fn decode_step(
        &mut self,
        token: TokenId,
        gate: Option<&GateVector>,
    ) -> Result<(Vec<f64>, StepAttention), ModelError> {
        let model = self.model;
        let cfg = &model.config;
        model.check_token(token)?;
        let pos = self.len;
        let attended = pos + 1;
        if attended > cfg.max_seq_len {
            return Err(ModelError::SequenceOverflow { len: attended, max: cfg.max_seq_len });
        }
        if let Some(g) = gate {
            if g.len() != attended {
                return Err(ModelError::GateLength { gate: g.len(), attended });
            }
        }
        let offsets = gate.map(|g| g.offsets());
        let mut x = model.embed(token, pos);
        let mut rows = Vec::new();
        for (l, layer) in model.weights.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = layer.wq.matvec(&h);
            let cache = &mut self.cache[l];
            cache.keys.extend(layer.wk.matvec(&h));
            cache.values.extend(layer.wv.matvec(&h));
            let record = model.recorded_heads(l);
            let attn = model.attend(l, &q, &cache.keys, &cache.values, attended, offsets, record.as_deref(), &mut rows);
            for (xi, d) in x.iter_mut().zip(layer.wo.matvec(&attn)) {
                *xi += d;
            }
            model.mlp(layer, &mut x);
        }
        self.len = attended;
        self.last_logits = model.logits(&x);
        self.last_attention = StepAttention::from_rows(attended, rows);
        Ok((self.last_logits.clone(), self.last_attention.clone()))
    }
}
