use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use pulsefocus::analytics::{self, DEFAULT_DIFFUSE_THRESHOLD};
use pulsefocus::controller::{BudgetConfig, TerminationReason};
use pulsefocus::format::{validate_transcript, Severity};
use pulsefocus::model::Preset;
use pulsefocus::run::RunSpec;
use pulsefocus::synthetic::PlantedBias;
use pulsefocus::trace::EpisodeMode;
use pulsefocus::trace_io::{self, AnalysisRequest};

const EXIT_FINDINGS: u8 = 1;
const EXIT_SPEC: u8 = 2;
const EXIT_GRAMMAR: u8 = 3;

#[derive(Parser)]
#[command(name = "pulsefocus", version, about = "Plan/focus decoding with attention gating, and trace analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its trace and transcript.
    Run(RunArgs),
    /// Compute pulse, colouring and alignment CSVs from a trace file.
    Analyze(AnalyzeArgs),
    /// Mean attention mass per image position over many traces.
    Bias(BiasArgs),
    /// Check a transcript against the plan/focus grammar.
    Validate(ValidateArgs),
    /// Long-format per-step mass table (step, series, mass) for plotting.
    PlotData(PlotDataArgs),
    /// Generate synthetic traces.
    Synth(SynthArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML file with any of the keys below (flag names with `_` for `-`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: tiny or small.
    #[arg(long)]
    preset: Option<Preset>,
    /// Seed for model weights and image tokens.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for temperature sampling.
    #[arg(long)]
    sampling_seed: Option<u64>,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,
    /// pulsefocus, plan-focus-nogate or free-cot.
    #[arg(long)]
    mode: Option<EpisodeMode>,
    /// Gate strength (logit penalty on non-focused images).
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Token cap per plan block.
    #[arg(long)]
    plan_max: Option<usize>,
    /// Token cap per focus block.
    #[arg(long)]
    focus_max: Option<usize>,
    /// Maximum plan/focus cycles.
    #[arg(long)]
    max_cycles: Option<usize>,
    /// Cap on all generated tokens (default derives from the block caps).
    #[arg(long)]
    total_cap: Option<usize>,
    /// Tokens allowed for the summary and answer after the last cycle.
    #[arg(long)]
    answer_max: Option<usize>,
    /// Number of images in the prompt.
    #[arg(long)]
    num_images: Option<usize>,
    /// Tokens per image.
    #[arg(long)]
    image_tokens: Option<usize>,
    /// Prompt template file; `{images}` marks where the images go.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Replay this transcript file instead of decoding from the model.
    #[arg(long)]
    scripted: Option<PathBuf>,
    /// Keep every selected-layer row in the trace.
    #[arg(long)]
    record_raw: bool,
    /// Free-form label stored in the trace (used by `bias --group-by tag`).
    #[arg(long)]
    tag: Option<String>,
    /// Output directory.
    #[arg(long, env = "PULSEFOCUS_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Output file stem.
    #[arg(long, default_value = "episode")]
    name: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    preset: Option<String>,
    seed: Option<u64>,
    sampling_seed: Option<u64>,
    temperature: Option<f64>,
    mode: Option<String>,
    lambda: Option<f64>,
    plan_max: Option<usize>,
    focus_max: Option<usize>,
    max_cycles: Option<usize>,
    total_cap: Option<usize>,
    answer_max: Option<usize>,
    num_images: Option<usize>,
    image_tokens: Option<usize>,
    template: Option<PathBuf>,
    scripted: Option<PathBuf>,
    record_raw: Option<bool>,
    tag: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    /// Per-step mass per image and text.
    #[arg(long)]
    pulse: bool,
    /// Dominant image per step.
    #[arg(long)]
    colouring: bool,
    /// Focus-block alignment (needs an annotated trace).
    #[arg(long)]
    alignment: bool,
    /// Dominance ratio below which a step counts as diffuse.
    #[arg(long, default_value_t = DEFAULT_DIFFUSE_THRESHOLD)]
    threshold: f64,
    /// Output directory (defaults to the trace's directory).
    #[arg(long, env = "PULSEFOCUS_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    Tag,
    None,
}

#[derive(Args)]
struct BiasArgs {
    /// Trace files or glob patterns.
    #[arg(required = true)]
    inputs: Vec<String>,
    /// Group traces for the std column.
    #[arg(long, value_enum, default_value_t = GroupBy::Tag)]
    group_by: GroupBy,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    transcript: PathBuf,
    #[arg(long)]
    num_images: usize,
    /// Treat warnings as findings too.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct PlotDataArgs {
    trace: PathBuf,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Planted,
    Uniform,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Planted)]
    kind: SynthKind,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Decay of mass with image position (planted only).
    #[arg(long, default_value_t = 0.7)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "PULSEFOCUS_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

/// An error that maps to a specific exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: EXIT_SPEC, error: e.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bias(a) => cmd_bias(a),
        Command::Validate(a) => cmd_validate(a),
        Command::PlotData(a) => cmd_plot_data(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_spec(args: &RunArgs) -> Result<RunSpec> {
    let cfg: RunConfig = match &args.config {
        Some(path) => toml::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => RunConfig::default(),
    };
    let base = RunSpec::default();
    let preset = match (&args.preset, &cfg.preset) {
        (Some(p), _) => *p,
        (None, Some(s)) => s.parse().map_err(|e: String| anyhow!(e))?,
        (None, None) => base.preset,
    };
    let mode = match (&args.mode, &cfg.mode) {
        (Some(m), _) => *m,
        (None, Some(s)) => s.parse().map_err(|e: String| anyhow!(e))?,
        (None, None) => base.mode,
    };
    let plan = args.plan_max.or(cfg.plan_max).unwrap_or(base.budget.plan_max_tokens);
    let focus = args.focus_max.or(cfg.focus_max).unwrap_or(base.budget.focus_max_tokens);
    let cycles = args.max_cycles.or(cfg.max_cycles).unwrap_or(base.budget.max_cycles);
    let mut budget = BudgetConfig::new(plan, focus, cycles);
    if let Some(t) = args.total_cap.or(cfg.total_cap) {
        budget.total_token_cap = t;
    }
    if let Some(a) = args.answer_max.or(cfg.answer_max) {
        budget.answer_max_tokens = a;
    }
    let template = match args.template.as_ref().or(cfg.template.as_ref()) {
        Some(p) => read_text(p)?,
        None => base.template,
    };
    let script = args.scripted.as_ref().or(cfg.scripted.as_ref()).map(|p| read_text(p)).transpose()?;
    let spec = RunSpec {
        preset,
        seed: args.seed.or(cfg.seed).unwrap_or(base.seed),
        mode,
        lambda: args.lambda.or(cfg.lambda).unwrap_or(base.lambda),
        budget,
        num_images: args.num_images.or(cfg.num_images).unwrap_or(base.num_images),
        image_tokens: args.image_tokens.or(cfg.image_tokens).unwrap_or(base.image_tokens),
        template,
        script,
        temperature: args.temperature.or(cfg.temperature).unwrap_or(base.temperature),
        sampling_seed: args.sampling_seed.or(cfg.sampling_seed).unwrap_or(base.sampling_seed),
        record_raw: args.record_raw || cfg.record_raw.unwrap_or(false),
        tag: args.tag.clone().or(cfg.tag),
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let spec = run_spec(&args)?;
    let result = spec.run()?;
    let trace_path = args.out_dir.join(format!("{}.trace.jsonl", args.name));
    let transcript_path = args.out_dir.join(format!("{}.transcript.txt", args.name));
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    trace_io::write_trace(&result.trace, &trace_path)?;
    write_text(&transcript_path, &result.transcript)?;

    let alignment = if result.trace.has_annotations() {
        let series = analytics::pulse_series(&result.trace)?;
        analytics::focus_alignment(&result.trace, &series)?.mean
    } else {
        None
    };
    let reason = result.budget_state.terminated_reason;
    println!(
        "steps={} cycles={} gated={} forced_closures={} reason={} alignment={} answer={} trace={}",
        result.trace.steps.len(),
        result.budget_state.cycles_completed,
        result.gated_steps(),
        result.budget_state.forced_closures,
        reason.map_or("none", |r| r.name()),
        alignment.map_or_else(|| "n/a".to_string(), trace_io::format_float),
        result.answer.map_or_else(|| "none".to_string(), |c| c.to_string()),
        trace_path.display(),
    );
    if reason == Some(TerminationReason::GrammarError) {
        return Err(Failure { code: EXIT_GRAMMAR, error: anyhow!("episode ended on a grammar error") });
    }
    Ok(())
}

fn trace_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    name.strip_suffix(".trace.jsonl").or_else(|| name.strip_suffix(".jsonl")).unwrap_or(&name).to_string()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let any = args.pulse || args.colouring || args.alignment;
    let request = AnalysisRequest {
        pulse: args.pulse || !any,
        colouring: args.colouring,
        alignment: args.alignment,
        diffuse_threshold: args.threshold,
    };
    let reports = trace_io::replay(&args.trace, &request)?;
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| args.trace.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = trace_stem(&args.trace);
    for (kind, csv) in [
        ("pulse", &reports.pulse_csv),
        ("colouring", &reports.colouring_csv),
        ("alignment", &reports.alignment_csv),
    ] {
        if let Some(csv) = csv {
            let path = out_dir.join(format!("{stem}.{kind}.csv"));
            write_text(&path, csv)?;
            println!("wrote {}", path.display());
        }
    }
    for notice in &reports.notices {
        eprintln!("note: {notice}");
    }
    println!("steps={} conservation_error={:.3e}", reports.steps, reports.conservation_error);
    if let Some(r) = &reports.reduction {
        println!("reduction_max_abs_diff={:.3e}", r.max_abs_diff);
    }
    if let Some(a) = &reports.alignment {
        println!(
            "focus_blocks={} mean_alignment={}",
            a.blocks.len(),
            a.mean.map_or_else(|| "n/a".to_string(), trace_io::format_float)
        );
    }
    Ok(())
}

fn expand_inputs(inputs: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pattern in inputs {
        let mut matched = false;
        for entry in glob::glob(pattern).with_context(|| format!("bad pattern `{pattern}`"))? {
            paths.push(entry?);
            matched = true;
        }
        if !matched {
            bail!("`{pattern}` matched no files");
        }
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

fn cmd_bias(args: BiasArgs) -> Result<(), Failure> {
    let paths = expand_inputs(&args.inputs)?;
    let traces = paths
        .iter()
        .map(|p| trace_io::read_trace(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let report = match args.group_by {
        GroupBy::Tag => analytics::positional_bias(&traces, |t| t.metadata.tag.clone().unwrap_or_default())?,
        GroupBy::None => analytics::positional_bias(&traces, |_| String::new())?,
    };
    let csv = trace_io::bias_csv(&report)?;
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            eprintln!("{} traces -> {}", report.traces, path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let text = read_text(&args.transcript)?;
    let report = validate_transcript(&text, args.num_images);
    for finding in &report.findings {
        println!("{}: {finding}", args.transcript.display());
    }
    let failing = report.findings.iter().any(|f| match f.severity {
        Severity::Error => true,
        Severity::Warning => args.strict,
        Severity::Note => false,
    });
    if !report.has_errors() {
        println!("plan_blocks={} focus_blocks={}", report.plan_blocks, report.focus_blocks);
    }
    if failing {
        return Err(Failure { code: EXIT_FINDINGS, error: anyhow!("{} finding(s)", report.findings.len()) });
    }
    Ok(())
}

fn cmd_plot_data(args: PlotDataArgs) -> Result<(), Failure> {
    let trace = trace_io::read_trace(&args.trace)?;
    let series = analytics::pulse_series(&trace)?;
    let csv = trace_io::plot_data_csv(&series)?;
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let generator = match args.kind {
        SynthKind::Planted => {
            if !(args.beta.is_finite() && args.beta > 0.0) {
                return Err(anyhow!("--beta must be positive").into());
            }
            PlantedBias::new(args.beta)
        }
        SynthKind::Uniform => PlantedBias::uniform(),
    };
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let width = args.count.max(1).to_string().len();
    for (i, trace) in generator.traces(args.count, args.seed).iter().enumerate() {
        let path = args.out_dir.join(format!("synth-{i:0width$}.trace.jsonl"));
        trace_io::write_trace(trace, &path)?;
    }
    println!("wrote {} traces to {}", args.count, args.out_dir.display());
    Ok(())
}
