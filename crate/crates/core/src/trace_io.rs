//! Trace files, CSV reports and replay.
//!
//! A trace file is UTF-8 JSON Lines: one header record followed by one step
//! record per decode step. See `docs/trace-format.md` for the field list.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    self, AnalyticsError, ColouringRecord, FocusAlignmentReport, PositionalBiasReport, PulseSeries, ReductionCheck,
};
use crate::layout::{ImageIndex, TokenLayout};
use crate::model::{HeadRow, TokenId};
use crate::trace::{Annotation, AttentionTrace, BlockMode, EpisodeMode, Seeds, StepMass, TraceMetadata, TraceStep};

pub const SCHEMA_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u32 = 1;
const SIZE_WARNING_BYTES: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: unsupported schema_version `{version}` (this build reads {SUPPORTED_MAJOR}.x)")]
    UnsupportedVersion { line: usize, version: String },
    #[error("trace has no header record")]
    MissingHeader,
    #[error("line {line}: expected a `{expected}` record, found `{found}`")]
    RecordKind { line: usize, expected: &'static str, found: String },
    #[error("line {line}: header says {claimed} images but the layout has {actual}")]
    ImageCount { line: usize, claimed: usize, actual: usize },
    #[error("line {line}: expected step {expected}, found {found}")]
    StepOrder { line: usize, expected: usize, found: usize },
    #[error("line {line}: row has {len} entries, step {step} needs {expected}")]
    RowLength { line: usize, step: usize, len: usize, expected: usize },
    #[error("line {line}: {len} image masses but the header declares {num_images} images")]
    MassLength { line: usize, len: usize, num_images: usize },
    #[error("line {line}: step carries neither `row` nor `mass`")]
    NoAttention { line: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TraceIoError + '_ {
    move |source| TraceIoError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    record: String,
    schema_version: String,
    layout: TokenLayout,
    num_images: usize,
    lambda: f64,
    mode: EpisodeMode,
    #[serde(default)]
    model_digest: Option<String>,
    #[serde(default)]
    selected_layers: Vec<usize>,
    #[serde(default)]
    seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MassRecord {
    images: Vec<f64>,
    text: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    record: String,
    step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_id: Option<TokenId>,
    #[serde(default)]
    token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<BlockMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    focus: Option<Vec<ImageIndex>>,
    #[serde(default)]
    injected: bool,
    #[serde(default)]
    gated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mass: Option<MassRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<Vec<HeadRow>>,
}

/// Writes `trace` as JSON Lines.
pub fn write_trace_to<W: Write>(trace: &AttentionTrace, mut out: W) -> io::Result<()> {
    let m = &trace.metadata;
    let header = HeaderRecord {
        record: "header".into(),
        schema_version: SCHEMA_VERSION.into(),
        layout: trace.layout.clone(),
        num_images: trace.num_images(),
        lambda: m.lambda,
        mode: m.mode,
        model_digest: m.model_digest.clone(),
        selected_layers: m.selected_layers.clone(),
        seeds: m.seeds.clone(),
        tag: m.tag.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for step in &trace.steps {
        let (row, mass) = match &step.attention {
            StepMass::Row(r) => (Some(r.clone()), None),
            StepMass::Mass { images, text } => (None, Some(MassRecord { images: images.clone(), text: *text })),
        };
        let record = StepRecord {
            record: "step".into(),
            step: step.index,
            token_id: step.token_id,
            token: step.token.clone(),
            mode: step.annotation.as_ref().map(|a| a.mode),
            focus: step.annotation.as_ref().and_then(|a| a.focus.clone()),
            injected: step.injected,
            gated: step.gated,
            row,
            mass,
            raw: step.raw.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_trace(trace: &AttentionTrace, path: &Path) -> Result<(), TraceIoError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_trace_to(trace, BufWriter::new(file)).map_err(io_err(path))?;
    let size = std::fs::metadata(path).map_err(io_err(path))?.len();
    if size > SIZE_WARNING_BYTES {
        log::warn!("{}: trace file is {size} bytes (over 1 GB)", path.display());
    }
    Ok(())
}

fn check_version(version: &str, line: usize) -> Result<(), TraceIoError> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(SUPPORTED_MAJOR) {
        return Err(TraceIoError::UnsupportedVersion { line, version: version.to_string() });
    }
    Ok(())
}

/// Reads a trace from JSON Lines. Blank lines are skipped; unknown fields
/// are ignored.
pub fn read_trace_from<R: BufRead>(input: R) -> Result<AttentionTrace, TraceIoError> {
    let mut trace: Option<AttentionTrace> = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| TraceIoError::Io { path: PathBuf::from("<input>"), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let kind: RecordKind = serde_json::from_str(&line).map_err(|source| TraceIoError::Json { line: line_no, source })?;
        let Some(t) = trace.as_mut() else {
            if kind.record != "header" {
                return Err(TraceIoError::RecordKind { line: line_no, expected: "header", found: kind.record });
            }
            if let Some(v) = &kind.schema_version {
                check_version(v, line_no)?;
            }
            let h: HeaderRecord =
                serde_json::from_str(&line).map_err(|source| TraceIoError::Json { line: line_no, source })?;
            if h.num_images != h.layout.num_images() {
                return Err(TraceIoError::ImageCount {
                    line: line_no,
                    claimed: h.num_images,
                    actual: h.layout.num_images(),
                });
            }
            let metadata = TraceMetadata {
                lambda: h.lambda,
                mode: h.mode,
                seeds: h.seeds,
                model_digest: h.model_digest,
                selected_layers: h.selected_layers,
                tag: h.tag,
            };
            trace = Some(AttentionTrace::new(h.layout, metadata));
            continue;
        };
        if kind.record != "step" {
            return Err(TraceIoError::RecordKind { line: line_no, expected: "step", found: kind.record });
        }
        let r: StepRecord = serde_json::from_str(&line).map_err(|source| TraceIoError::Json { line: line_no, source })?;
        let k = t.steps.len();
        if r.step != k {
            return Err(TraceIoError::StepOrder { line: line_no, expected: k, found: r.step });
        }
        let attention = match (r.row, r.mass) {
            (Some(row), _) => {
                let expected = t.prompt_len() + k;
                if row.len() != expected {
                    return Err(TraceIoError::RowLength { line: line_no, step: k, len: row.len(), expected });
                }
                StepMass::Row(row)
            }
            (None, Some(m)) => {
                if m.images.len() != t.num_images() {
                    return Err(TraceIoError::MassLength { line: line_no, len: m.images.len(), num_images: t.num_images() });
                }
                StepMass::Mass { images: m.images, text: m.text }
            }
            (None, None) => return Err(TraceIoError::NoAttention { line: line_no }),
        };
        t.steps.push(TraceStep {
            index: k,
            token_id: r.token_id,
            token: r.token,
            annotation: r.mode.map(|mode| Annotation { mode, focus: r.focus }),
            injected: r.injected,
            gated: r.gated,
            attention,
            raw: r.raw,
        });
    }
    trace.ok_or(TraceIoError::MissingHeader)
}

#[derive(Deserialize)]
struct RecordKind {
    record: String,
    #[serde(default)]
    schema_version: Option<String>,
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace, TraceIoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let size = file.metadata().map_err(io_err(path))?.len();
    if size > SIZE_WARNING_BYTES {
        log::warn!("{}: trace file is {size} bytes (over 1 GB)", path.display());
    }
    read_trace_from(BufReader::new(file)).map_err(|e| match e {
        TraceIoError::Io { source, .. } => TraceIoError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

/// Formats a float with at most 9 significant digits, using the fewest
/// digits that reproduce the 9-digit rounding.
///
/// Plain decimal notation is used for exponents in `-5..=8`, scientific
/// (`1.5e-7`) otherwise. Zero is `0`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let target: f64 = format!("{v:.8e}").parse().expect("float");
    let sci = (0..=8)
        .map(|p| format!("{v:.p$e}"))
        .find(|s| s.parse::<f64>().expect("float") == target)
        .expect("9 digits always match");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    if !(-5..=8).contains(&exp) {
        return format!("{sign}{mantissa}e{exp}");
    }
    if exp < 0 {
        return format!("{sign}0.{}{digits}", "0".repeat((-exp - 1) as usize));
    }
    let int_len = exp as usize + 1;
    if digits.len() <= int_len {
        format!("{sign}{digits}{}", "0".repeat(int_len - digits.len()))
    } else {
        format!("{sign}{}.{}", &digits[..int_len], &digits[int_len..])
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String, TraceIoError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| TraceIoError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

/// `step,image_1..image_N,text_mass`
pub fn pulse_csv(series: &PulseSeries) -> Result<String, TraceIoError> {
    let mut header = vec!["step".to_string()];
    header.extend((1..=series.num_images).map(|j| format!("image_{j}")));
    header.push("text_mass".into());
    let mut rows = vec![header];
    for (k, (a, t)) in series.images.iter().zip(&series.text_mass).enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(a.iter().map(|&v| format_float(v)));
        row.push(format_float(*t));
        rows.push(row);
    }
    csv_string(rows)
}

/// `step,series,mass` in long format, one row per step and series.
pub fn plot_data_csv(series: &PulseSeries) -> Result<String, TraceIoError> {
    let mut rows = vec![vec!["step".to_string(), "series".into(), "mass".into()]];
    for (k, (a, t)) in series.images.iter().zip(&series.text_mass).enumerate() {
        for (j, v) in a.iter().enumerate() {
            rows.push(vec![k.to_string(), format!("image_{}", j + 1), format_float(*v)]);
        }
        rows.push(vec![k.to_string(), "text".into(), format_float(*t)]);
    }
    csv_string(rows)
}

/// `step,token,dominant,ratio,diffuse`; `dominant` and `ratio` are empty
/// when the step has no image mass.
pub fn colouring_csv(records: &[ColouringRecord], trace: &AttentionTrace) -> Result<String, TraceIoError> {
    let mut rows = vec![vec!["step".to_string(), "token".into(), "dominant".into(), "ratio".into(), "diffuse".into()]];
    for r in records {
        let token = trace.steps.get(r.step).map(|s| s.token.clone()).unwrap_or_default();
        rows.push(vec![
            r.step.to_string(),
            token,
            r.dominant.map(|d| d.to_string()).unwrap_or_default(),
            r.ratio.map(format_float).unwrap_or_default(),
            r.diffuse.to_string(),
        ]);
    }
    csv_string(rows)
}

/// `block,images,first_step,last_step,steps,alignment`
pub fn alignment_csv(report: &FocusAlignmentReport) -> Result<String, TraceIoError> {
    let mut rows = vec![["block", "images", "first_step", "last_step", "steps", "alignment"].map(String::from).to_vec()];
    for (i, b) in report.blocks.iter().enumerate() {
        let images: Vec<String> = b.images.iter().map(|j| format!("I{j}")).collect();
        rows.push(vec![
            i.to_string(),
            images.join(","),
            b.first_step.to_string(),
            b.last_step.to_string(),
            b.steps.to_string(),
            format_float(b.alignment),
        ]);
    }
    csv_string(rows)
}

/// `position,mean,std,n`
pub fn bias_csv(report: &PositionalBiasReport) -> Result<String, TraceIoError> {
    let mut rows = vec![["position", "mean", "std", "n"].map(String::from).to_vec()];
    for p in &report.positions {
        rows.push(vec![p.position.to_string(), format_float(p.mean), format_float(p.std), p.n.to_string()]);
    }
    csv_string(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Live,
    Replay,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Live => "live",
            Source::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisRequest {
    pub pulse: bool,
    pub colouring: bool,
    pub alignment: bool,
    pub diffuse_threshold: f64,
}

impl AnalysisRequest {
    pub fn all() -> Self {
        Self { pulse: true, colouring: true, alignment: true, diffuse_threshold: analytics::DEFAULT_DIFFUSE_THRESHOLD }
    }
}

impl Default for AnalysisRequest {
    fn default() -> Self {
        Self { pulse: true, colouring: false, alignment: false, diffuse_threshold: analytics::DEFAULT_DIFFUSE_THRESHOLD }
    }
}

#[derive(Debug, Clone)]
pub struct Reports {
    pub source: Source,
    pub steps: usize,
    pub pulse_csv: Option<String>,
    pub colouring_csv: Option<String>,
    pub alignment_csv: Option<String>,
    pub alignment: Option<FocusAlignmentReport>,
    /// `None` when the trace keeps no raw rows.
    pub reduction: Option<ReductionCheck>,
    pub conservation_error: f64,
    pub notices: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Io(#[from] TraceIoError),
}

/// Runs the requested analyses; live episodes and replayed files share this path.
pub fn analyze(trace: &AttentionTrace, request: &AnalysisRequest, source: Source) -> Result<Reports, AnalyzeError> {
    let series = analytics::pulse_series(trace)?;
    let mut notices = Vec::new();
    let reduction = analytics::reduction_check(trace, &series);
    if reduction.is_none() {
        notices.push("trace keeps no raw selected-layer rows; reduction check skipped".to_string());
    }
    let pulse_csv = request.pulse.then(|| pulse_csv(&series)).transpose()?;
    let colouring_csv = if request.colouring {
        Some(colouring_csv(&analytics::colouring(&series, request.diffuse_threshold), trace)?)
    } else {
        None
    };
    let (alignment_csv, alignment) = if request.alignment {
        let report = analytics::focus_alignment(trace, &series)?;
        if report.blocks.is_empty() {
            notices.push("trace has no focus blocks; alignment report is empty".to_string());
        }
        (Some(alignment_csv(&report)?), Some(report))
    } else {
        (None, None)
    };
    Ok(Reports {
        source,
        steps: series.len(),
        pulse_csv,
        colouring_csv,
        alignment_csv,
        alignment,
        reduction,
        conservation_error: series.conservation_error(),
        notices,
    })
}

/// Reads a trace file and analyzes it.
pub fn replay(path: &Path, request: &AnalysisRequest) -> Result<Reports, AnalyzeError> {
    let trace = read_trace(path)?;
    analyze(&trace, request, Source::Replay)
}
