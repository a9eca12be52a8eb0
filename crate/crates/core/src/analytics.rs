//! Attention diagnostics over traces: per-image mass, positional bias,
//! per-token colouring and focus alignment.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::layout::{ImageIndex, TokenLayout};
use crate::model::HeadRow;
use crate::trace::{AttentionTrace, BlockMode, StepMass};

/// Default dominance ratio below which a step counts as diffuse.
pub const DEFAULT_DIFFUSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("step {step}: row has {len} entries, expected {expected}")]
    RowLength { step: usize, len: usize, expected: usize },
    #[error("step {step}: {len} image masses for {num_images} images")]
    MassLength { step: usize, len: usize, num_images: usize },
    #[error("no traces to aggregate")]
    Empty,
    #[error("trace {index} has {num_images} images; positional bias needs at least 2")]
    TooFewImages { index: usize, num_images: usize },
    #[error("trace has no block annotations; alignment needs them")]
    MissingAnnotations,
}

/// Layer indices at 0%, 50% and 100% depth.
pub fn select_diagnostic_layers(num_layers: usize) -> Vec<usize> {
    if num_layers == 0 {
        return Vec::new();
    }
    let mut layers = vec![0, (num_layers - 1) / 2, num_layers - 1];
    layers.dedup();
    layers
}

/// Mass on every image and on text for one row.
pub fn row_masses(row: &[f64], layout: &TokenLayout) -> (Vec<f64>, f64) {
    let mut images = vec![0.0; layout.num_images()];
    let mut text = 0.0;
    for (p, &a) in row.iter().enumerate() {
        match layout.image_at(p) {
            Some(j) => images[j - 1] += a,
            None => text += a,
        }
    }
    (images, text)
}

/// `a[k][j - 1]` is the attention mass step `k` puts on image `j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PulseSeries {
    pub num_images: usize,
    pub images: Vec<Vec<f64>>,
    pub text_mass: Vec<f64>,
}

impl PulseSeries {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Largest violation of `sum_j a[k][j] + text[k] = 1` over all steps.
    pub fn conservation_error(&self) -> f64 {
        self.images
            .iter()
            .zip(&self.text_mass)
            .map(|(a, t)| (a.iter().sum::<f64>() + t - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn pulse_series(trace: &AttentionTrace) -> Result<PulseSeries, AnalyticsError> {
    let n = trace.num_images();
    let prompt_len = trace.prompt_len();
    let mut images = Vec::with_capacity(trace.steps.len());
    let mut text_mass = Vec::with_capacity(trace.steps.len());
    for (k, step) in trace.steps.iter().enumerate() {
        match &step.attention {
            StepMass::Row(row) => {
                if row.len() != prompt_len + k {
                    return Err(AnalyticsError::RowLength { step: k, len: row.len(), expected: prompt_len + k });
                }
                let (a, t) = row_masses(row, &trace.layout);
                images.push(a);
                text_mass.push(t);
            }
            StepMass::Mass { images: a, text } => {
                if a.len() != n {
                    return Err(AnalyticsError::MassLength { step: k, len: a.len(), num_images: n });
                }
                images.push(a.clone());
                text_mass.push(*text);
            }
        }
    }
    Ok(PulseSeries { num_images: n, images, text_mass })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColouringRecord {
    pub step: usize,
    /// `None` when the step puts no mass on any image.
    pub dominant: Option<ImageIndex>,
    /// Dominant image's share of the total image mass.
    pub ratio: Option<f64>,
    pub diffuse: bool,
}

/// Dominant image per step; ties go to the lower index.
pub fn colouring(series: &PulseSeries, threshold: f64) -> Vec<ColouringRecord> {
    series
        .images
        .iter()
        .enumerate()
        .map(|(step, a)| {
            let total: f64 = a.iter().sum();
            let best = a.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            });
            match best {
                Some((i, v)) if total > 0.0 => {
                    let ratio = v / total;
                    ColouringRecord { step, dominant: Some(i + 1), ratio: Some(ratio), diffuse: ratio < threshold }
                }
                _ => ColouringRecord { step, dominant: None, ratio: None, diffuse: true },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockAlignment {
    pub images: Vec<ImageIndex>,
    pub first_step: usize,
    pub last_step: usize,
    /// Steps that contributed (steps with zero image mass are skipped).
    pub steps: usize,
    pub alignment: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FocusAlignmentReport {
    pub blocks: Vec<BlockAlignment>,
    /// Mean over blocks; `None` when there are no focus blocks.
    pub mean: Option<f64>,
}

impl FocusAlignmentReport {
    /// `self.mean - baseline.mean`, when both exist.
    pub fn lift_over(&self, baseline: &FocusAlignmentReport) -> Option<f64> {
        Some(self.mean? - baseline.mean?)
    }
}

/// Fraction of image mass on the focused images, averaged per focus block.
///
/// A block is a maximal run of consecutive steps annotated `Focus` with the
/// same image set.
pub fn focus_alignment(trace: &AttentionTrace, series: &PulseSeries) -> Result<FocusAlignmentReport, AnalyticsError> {
    if !trace.has_annotations() {
        return Err(AnalyticsError::MissingAnnotations);
    }
    let mut runs: Vec<(Vec<ImageIndex>, usize, usize)> = Vec::new();
    for (k, step) in trace.steps.iter().enumerate() {
        let focus = match &step.annotation {
            Some(a) if a.mode == BlockMode::Focus => a.focus.clone(),
            _ => None,
        };
        let Some(images) = focus else { continue };
        match runs.last_mut() {
            Some((prev, _, last)) if *prev == images && *last + 1 == k => *last = k,
            _ => runs.push((images, k, k)),
        }
    }
    let mut blocks = Vec::new();
    for (images, first, last) in runs {
        let mut sum = 0.0;
        let mut count = 0;
        for a in &series.images[first..=last] {
            let total: f64 = a.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let focused: f64 = images.iter().filter_map(|&j| a.get(j - 1)).sum();
            sum += focused / total;
            count += 1;
        }
        if count > 0 {
            blocks.push(BlockAlignment { images, first_step: first, last_step: last, steps: count, alignment: sum / count as f64 });
        }
    }
    let mean = (!blocks.is_empty()).then(|| blocks.iter().map(|b| b.alignment).sum::<f64>() / blocks.len() as f64);
    Ok(FocusAlignmentReport { blocks, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionStats {
    pub position: ImageIndex,
    pub mean: f64,
    /// Population standard deviation of the per-group means.
    pub std: f64,
    /// Number of traces with at least `position` images.
    pub n: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionalBiasReport {
    pub positions: Vec<PositionStats>,
    pub traces: usize,
}

/// Time-averaged mass per image for one trace.
pub fn mean_image_mass(series: &PulseSeries) -> Vec<f64> {
    let mut mean = vec![0.0; series.num_images];
    for a in &series.images {
        for (m, v) in mean.iter_mut().zip(a) {
            *m += v;
        }
    }
    let k = series.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

/// Mean attention mass per image position across traces.
///
/// Each trace is first averaged over its steps. Position `j` only uses
/// traces with at least `j` images; the reported mean pools those traces and
/// the std is taken across the per-group means.
pub fn positional_bias<F>(traces: &[AttentionTrace], group: F) -> Result<PositionalBiasReport, AnalyticsError>
where
    F: Fn(&AttentionTrace) -> String + Sync,
{
    if traces.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let per_trace: Vec<(String, Vec<f64>)> = traces
        .par_iter()
        .enumerate()
        .map(|(index, trace)| {
            if trace.num_images() < 2 {
                return Err(AnalyticsError::TooFewImages { index, num_images: trace.num_images() });
            }
            Ok((group(trace), mean_image_mass(&pulse_series(trace)?)))
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate_bias(&per_trace))
}

/// Aggregates `(group, per-image mean)` pairs in input order.
pub fn aggregate_bias(per_trace: &[(String, Vec<f64>)]) -> PositionalBiasReport {
    let max_n = per_trace.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    let mut positions = Vec::with_capacity(max_n);
    for j in 0..max_n {
        let mut pooled = 0.0;
        let mut n = 0;
        let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (g, means) in per_trace {
            let Some(&v) = means.get(j) else { continue };
            pooled += v;
            n += 1;
            let e = groups.entry(g.as_str()).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let group_means: Vec<f64> = groups.values().map(|(s, c)| s / *c as f64).collect();
        let gm = group_means.iter().sum::<f64>() / group_means.len() as f64;
        let var = group_means.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / group_means.len() as f64;
        positions.push(PositionStats { position: j + 1, mean: pooled / n as f64, std: var.sqrt(), n, groups: group_means.len() });
    }
    PositionalBiasReport { positions, traces: per_trace.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionCheck {
    pub steps: usize,
    pub max_abs_diff: f64,
}

/// Recomputes the per-image masses from raw selected-layer rows and compares
/// them with `series`. `None` when the trace does not retain raw rows.
pub fn reduction_check(trace: &AttentionTrace, series: &PulseSeries) -> Option<ReductionCheck> {
    if !trace.has_raw() {
        return None;
    }
    let mut max_abs_diff: f64 = 0.0;
    for (k, step) in trace.steps.iter().enumerate() {
        let raw: &[HeadRow] = step.raw.as_deref().unwrap_or(&[]);
        let len = trace.prompt_len() + k;
        let mut mean = vec![0.0; len];
        for row in raw {
            for (m, w) in mean.iter_mut().zip(&row.weights) {
                *m += w;
            }
        }
        mean.iter_mut().for_each(|m| *m /= raw.len().max(1) as f64);
        let (a, t) = row_masses(&mean, &trace.layout);
        for (x, y) in a.iter().zip(&series.images[k]) {
            max_abs_diff = max_abs_diff.max((x - y).abs());
        }
        max_abs_diff = max_abs_diff.max((t - series.text_mass[k]).abs());
    }
    Some(ReductionCheck { steps: trace.steps.len(), max_abs_diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Annotation, TraceMetadata, TraceStep};

    fn step(k: usize, attention: StepMass, annotation: Option<Annotation>) -> TraceStep {
        TraceStep {
            index: k,
            token_id: None,
            token: String::new(),
            annotation,
            injected: false,
            gated: false,
            attention,
            raw: None,
        }
    }

    fn mass_trace(rows: &[&[f64]], focus: Option<Vec<usize>>) -> AttentionTrace {
        let n = rows[0].len();
        let mut layout = TokenLayout::builder().text(1);
        for _ in 0..n {
            layout = layout.image(1);
        }
        let mut t = AttentionTrace::new(layout.build(), TraceMetadata::default());
        for (k, a) in rows.iter().enumerate() {
            let text = 1.0 - a.iter().sum::<f64>();
            let ann = focus.clone().map(Annotation::focus);
            t.steps.push(step(k, StepMass::Mass { images: a.to_vec(), text }, ann));
        }
        t
    }

    #[test]
    fn diagnostic_layers() {
        assert_eq!(select_diagnostic_layers(32), vec![0, 15, 31]);
        assert_eq!(select_diagnostic_layers(1), vec![0]);
        assert_eq!(select_diagnostic_layers(2), vec![0, 1]);
        assert_eq!(select_diagnostic_layers(3), vec![0, 1, 2]);
        assert_eq!(select_diagnostic_layers(4), vec![0, 1, 3]);
        for l in 1..64 {
            let hand: std::collections::BTreeSet<usize> = [0, (l - 1) / 2, l - 1].into_iter().collect();
            assert_eq!(select_diagnostic_layers(l), hand.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn pulse_from_rows() {
        let layout = TokenLayout::builder().text(1).image(1).image(2).build();
        let mut t = AttentionTrace::new(layout, TraceMetadata::default());
        t.steps.push(step(0, StepMass::Row(vec![0.4, 0.3, 0.2, 0.1]), None));
        let s = pulse_series(&t).unwrap();
        assert!((s.images[0][0] - 0.3).abs() < 1e-15);
        assert!((s.images[0][1] - 0.3).abs() < 1e-15);
        assert!((s.text_mass[0] - 0.4).abs() < 1e-15);
        assert!(s.conservation_error() < 1e-12);
    }

    #[test]
    fn uniform_rows_split_evenly() {
        let layout = TokenLayout::builder().image(3).image(3).build();
        let mut t = AttentionTrace::new(layout, TraceMetadata::default());
        for k in 0..4 {
            // generated positions are text, so only step 0 has no text mass
            let len = 6 + k;
            let mut row = vec![0.0; len];
            row[..6].iter_mut().for_each(|r| *r = 1.0 / 6.0);
            t.steps.push(step(k, StepMass::Row(row), None));
        }
        let s = pulse_series(&t).unwrap();
        for a in &s.images {
            assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn row_length_must_match_step() {
        let layout = TokenLayout::builder().text(2).image(2).build();
        let mut t = AttentionTrace::new(layout, TraceMetadata::default());
        t.steps.push(step(0, StepMass::Row(vec![0.25; 4]), None));
        t.steps.push(step(1, StepMass::Row(vec![0.25; 4]), None));
        assert_eq!(pulse_series(&t), Err(AnalyticsError::RowLength { step: 1, len: 4, expected: 5 }));
    }

    #[test]
    fn colouring_examples() {
        let t = mass_trace(&[&[0.05, 0.80, 0.05], &[0.34, 0.33, 0.33], &[0.0, 0.0, 0.0]], None);
        let c = colouring(&pulse_series(&t).unwrap(), DEFAULT_DIFFUSE_THRESHOLD);
        assert_eq!(c[0].dominant, Some(2));
        assert!((c[0].ratio.unwrap() - 0.80 / 0.90).abs() < 1e-12);
        assert!(!c[0].diffuse);
        assert_eq!(c[1].dominant, Some(1));
        assert!((c[1].ratio.unwrap() - 0.34).abs() < 1e-12);
        assert!(c[1].diffuse);
        assert_eq!(c[2].dominant, None);
        assert_eq!(c[2].ratio, None);
    }

    #[test]
    fn perfect_focus_block() {
        let rows: Vec<Vec<f64>> = (0..5).map(|k| {
            let mut a = vec![0.0; 6];
            a[4] = 0.5 + 0.05 * k as f64;
            a
        }).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let t = mass_trace(&refs, Some(vec![5]));
        let r = focus_alignment(&t, &pulse_series(&t).unwrap()).unwrap();
        assert_eq!(r.blocks.len(), 1);
        assert_eq!(r.blocks[0].alignment, 1.0);
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn alignment_needs_annotations() {
        let t = mass_trace(&[&[0.5, 0.5]], None);
        let s = pulse_series(&t).unwrap();
        assert_eq!(focus_alignment(&t, &s), Err(AnalyticsError::MissingAnnotations));
        let mut t2 = t.clone();
        t2.steps[0].annotation = Some(Annotation::new(BlockMode::Plan));
        let r = focus_alignment(&t2, &s).unwrap();
        assert!(r.blocks.is_empty() && r.mean.is_none());
    }

    #[test]
    fn bias_single_group_has_zero_std() {
        let t = mass_trace(&[&[0.6, 0.3], &[0.4, 0.3]], None);
        let r = positional_bias(std::slice::from_ref(&t), |_| "all".into()).unwrap();
        assert_eq!(r.positions.len(), 2);
        assert!((r.positions[0].mean - 0.5).abs() < 1e-12);
        assert_eq!(r.positions[0].std, 0.0);
        assert_eq!(r.positions[1].n, 1);
    }

    #[test]
    fn bias_restricts_positions_to_traces_with_enough_images() {
        let a = mass_trace(&[&[0.5, 0.3]], None);
        let b = mass_trace(&[&[0.3, 0.2, 0.1]], None);
        let r = positional_bias(&[a, b], |t| t.num_images().to_string()).unwrap();
        assert_eq!(r.positions.iter().map(|p| p.n).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert!((r.positions[0].mean - 0.4).abs() < 1e-12);
        assert!((r.positions[0].std - 0.1).abs() < 1e-12);
        assert!((r.positions[2].mean - 0.1).abs() < 1e-12);
        assert!(positional_bias(&[], |_| String::new()).is_err());
    }
}
