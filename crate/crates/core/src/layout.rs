//! Position maps for multi-image prompts.
//!
//! A [`TokenLayout`] partitions the prompt positions `[0, total_len)` into
//! contiguous text and image segments. Image `j` (1-based) owns exactly one
//! segment, its visual-token span `S_j`. Positions past the layout (tokens
//! produced during decoding) are treated as text everywhere in the crate.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1-based image index.
pub type ImageIndex = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("segment {index} starts at {start} but the previous segment ended at {expected}")]
    NotContiguous { index: usize, start: usize, expected: usize },
    #[error("segment {index} has end {end} before start {start}")]
    Inverted { index: usize, start: usize, end: usize },
    #[error("segments cover [0, {covered}) but total_len is {total_len}")]
    Coverage { covered: usize, total_len: usize },
    #[error("image index {0} appears in more than one segment")]
    DuplicateImage(ImageIndex),
    #[error("image indices must be exactly 1..={num_images}; index {missing} is missing")]
    MissingImage { num_images: usize, missing: ImageIndex },
    #[error("image index 0 is not valid (indices are 1-based)")]
    ZeroImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    Image { index: ImageIndex },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(flatten)]
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Validated text/image segmentation of a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenLayout {
    total_len: usize,
    segments: Vec<Segment>,
    /// `image_spans[j - 1]` is `S_j`.
    #[serde(skip)]
    image_spans: Vec<Range<usize>>,
}

impl TokenLayout {
    pub fn new(total_len: usize, segments: Vec<Segment>) -> Result<Self, LayoutError> {
        let mut expected = 0;
        let mut seen: Vec<Option<Range<usize>>> = Vec::new();
        for (index, seg) in segments.iter().enumerate() {
            if seg.start != expected {
                return Err(LayoutError::NotContiguous { index, start: seg.start, expected });
            }
            if seg.end < seg.start {
                return Err(LayoutError::Inverted { index, start: seg.start, end: seg.end });
            }
            if let SegmentKind::Image { index: j } = seg.kind {
                if j == 0 {
                    return Err(LayoutError::ZeroImage);
                }
                if seen.len() < j {
                    seen.resize(j, None);
                }
                if seen[j - 1].is_some() {
                    return Err(LayoutError::DuplicateImage(j));
                }
                seen[j - 1] = Some(seg.range());
            }
            expected = seg.end;
        }
        if expected != total_len {
            return Err(LayoutError::Coverage { covered: expected, total_len });
        }
        let num_images = seen.len();
        let image_spans = seen
            .into_iter()
            .enumerate()
            .map(|(i, span)| span.ok_or(LayoutError::MissingImage { num_images, missing: i + 1 }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { total_len, segments, image_spans })
    }

    /// Text-only layout of the given length (`N = 0`).
    pub fn text_only(total_len: usize) -> Self {
        let segments = if total_len == 0 {
            Vec::new()
        } else {
            vec![Segment { kind: SegmentKind::Text, start: 0, end: total_len }]
        };
        Self { total_len, segments, image_spans: Vec::new() }
    }

    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_images(&self) -> usize {
        self.image_spans.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// `S_j` for a 1-based image index.
    pub fn image_span(&self, j: ImageIndex) -> Option<Range<usize>> {
        j.checked_sub(1).and_then(|i| self.image_spans.get(i)).cloned()
    }

    pub fn image_spans(&self) -> impl Iterator<Item = (ImageIndex, Range<usize>)> + '_ {
        self.image_spans.iter().cloned().enumerate().map(|(i, r)| (i + 1, r))
    }

    /// Image owning position `p`, or `None` for text and post-layout positions.
    pub fn image_at(&self, p: usize) -> Option<ImageIndex> {
        if p >= self.total_len {
            return None;
        }
        let idx = self.segments.partition_point(|s| s.end <= p);
        match self.segments.get(idx)?.kind {
            SegmentKind::Image { index } => Some(index),
            SegmentKind::Text => None,
        }
    }
}

impl<'de> Deserialize<'de> for TokenLayout {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            total_len: usize,
            segments: Vec<Segment>,
        }
        let raw = Raw::deserialize(deserializer)?;
        TokenLayout::new(raw.total_len, raw.segments).map_err(serde::de::Error::custom)
    }
}

/// Appends segments left to right, numbering images in order of appearance.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
    images: usize,
}

impl LayoutBuilder {
    pub fn text(mut self, len: usize) -> Self {
        if len > 0 {
            match self.segments.last_mut() {
                Some(last) if last.kind == SegmentKind::Text => last.end += len,
                _ => self.segments.push(Segment { kind: SegmentKind::Text, start: self.len, end: self.len + len }),
            }
            self.len += len;
        }
        self
    }

    pub fn image(mut self, len: usize) -> Self {
        self.images += 1;
        self.segments.push(Segment {
            kind: SegmentKind::Image { index: self.images },
            start: self.len,
            end: self.len + len,
        });
        self.len += len;
        self
    }

    pub fn build(self) -> TokenLayout {
        TokenLayout::new(self.len, self.segments).expect("builder produces contiguous segments")
    }
}
