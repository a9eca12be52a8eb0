//! Soft attention gating.
//!
//! While a focus block is open, every attention head in every layer receives
//! an additive offset on its pre-softmax logits: `0` on text positions and on
//! the visual tokens of focused images, `-lambda` on the visual tokens of all
//! other images. Because the offset is applied in logit space, suppressed
//! positions keep a strictly positive share of attention for any finite
//! `lambda`.
//!
//! [`gated_distribution_oracle`] reproduces the post-softmax effect of a gate
//! directly from an ungated probability row, which is what the tests use to
//! check the model's gated kernel.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{ImageIndex, TokenLayout};

/// Gate strength used when none is configured.
pub const DEFAULT_LAMBDA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatingError {
    #[error("gate strength must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("focus set is empty")]
    EmptyFocus,
    #[error("image index {index} is out of range for {num_images} images")]
    IndexOutOfRange { index: ImageIndex, num_images: usize },
    #[error("baseline row sums to {0}, expected 1 within 1e-9")]
    NotNormalized(f64),
    #[error("baseline row has a negative entry at position {0}")]
    NegativeWeight(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    lambda: f64,
}

impl GateConfig {
    pub fn new(lambda: f64) -> Result<Self, GatingError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(GatingError::InvalidLambda(lambda));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

/// Indices of the currently focused images (non-empty, sorted, deduplicated).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FocusSet(BTreeSet<ImageIndex>);

impl FocusSet {
    pub fn new<I: IntoIterator<Item = ImageIndex>>(indices: I) -> Result<Self, GatingError> {
        let set: BTreeSet<_> = indices.into_iter().collect();
        if set.is_empty() {
            return Err(GatingError::EmptyFocus);
        }
        if set.contains(&0) {
            return Err(GatingError::IndexOutOfRange { index: 0, num_images: 0 });
        }
        Ok(Self(set))
    }

    pub fn contains(&self, j: ImageIndex) -> bool {
        self.0.contains(&j)
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageIndex> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<ImageIndex> {
        self.iter().collect()
    }

    fn check_range(&self, num_images: usize) -> Result<(), GatingError> {
        match self.0.iter().next_back() {
            Some(&max) if max > num_images => Err(GatingError::IndexOutOfRange { index: max, num_images }),
            _ => Ok(()),
        }
    }
}

/// Per-position additive logit offsets over an attended length.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    offsets: Vec<f64>,
}

impl GateVector {
    pub fn zeros(len: usize) -> Self {
        Self { offsets: vec![0.0; len] }
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.iter().all(|&d| d == 0.0)
    }
}

/// Builds the gate for `focus` over `attended_len` positions.
///
/// Positions past the layout are generated tokens and always get offset 0.
pub fn build_gate(
    layout: &TokenLayout,
    focus: &FocusSet,
    config: &GateConfig,
    attended_len: usize,
) -> Result<GateVector, GatingError> {
    focus.check_range(layout.num_images())?;
    let mut offsets = vec![0.0; attended_len];
    for (j, span) in layout.image_spans() {
        if focus.contains(j) {
            continue;
        }
        let end = span.end.min(attended_len);
        for d in offsets.iter_mut().take(end).skip(span.start) {
            *d = -config.lambda;
        }
    }
    Ok(GateVector { offsets })
}

/// Post-softmax row obtained by gating `baseline`, computed without logits.
///
/// With `M` the baseline mass on non-focused image positions and
/// `Z = 1 - (1 - e^-lambda) * M`, each suppressed weight becomes
/// `alpha * e^-lambda / Z` and every other weight `alpha / Z`.
pub fn gated_distribution_oracle(
    baseline: &[f64],
    layout: &TokenLayout,
    focus: &FocusSet,
    lambda: f64,
) -> Result<Vec<f64>, GatingError> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(GatingError::InvalidLambda(lambda));
    }
    focus.check_range(layout.num_images())?;
    if let Some(p) = baseline.iter().position(|&a| a < 0.0) {
        return Err(GatingError::NegativeWeight(p));
    }
    let total: f64 = baseline.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(GatingError::NotNormalized(total));
    }

    let suppressed = |p: usize| layout.image_at(p).is_some_and(|j| !focus.contains(j));
    let mass: f64 = baseline.iter().enumerate().filter(|(p, _)| suppressed(*p)).map(|(_, a)| a).sum();
    let keep = (-lambda).exp();
    let z = 1.0 - (1.0 - keep) * mass;
    Ok(baseline
        .iter()
        .enumerate()
        .map(|(p, &a)| if suppressed(p) { a * keep / z } else { a / z })
        .collect())
}

/// Attention mass on image `j`: the sum of `row` over `S_j`.
pub fn focus_mass(row: &[f64], layout: &TokenLayout, j: ImageIndex) -> Result<f64, GatingError> {
    let span = layout
        .image_span(j)
        .ok_or(GatingError::IndexOutOfRange { index: j, num_images: layout.num_images() })?;
    let end = span.end.min(row.len());
    Ok(row.get(span.start..end).map_or(0.0, |s| s.iter().sum()))
}
