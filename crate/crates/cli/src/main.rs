//! `roundattn` command line: analyze, memory, run, compare.
//!
//! Exit codes: 0 success, 2 bad input, 3 internal invariant violation.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::Value;

use config::{Settings, StrategyArg};
use roundattn::analysis::calibrate_watershed;
use roundattn::conversation::load_attention_trace;
use roundattn::report::{
    cmd_analyze, cmd_compare, cmd_memory, cmd_run, compare_table_csv, render, AnalyzeInput,
    AnalyzeReport, RunSettings, WatershedSource,
};
use roundattn::{
    parse_conversation, Conversation, DropPolicy, FootprintParams, Mode, Model, WatershedCriterion,
};

#[derive(Debug, Parser)]
#[command(name = "roundattn", version, about = "Round-level KV-cache selection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-round attention statistics and the watershed layer of a corpus.
    Analyze(Invocation),
    /// Memory footprint of round selection plus the reference model rows.
    Memory(Invocation),
    /// Run one policy over conversations.
    Run(Invocation),
    /// Paired runs of several policies against a full-history baseline.
    Compare(Invocation),
}

#[derive(Debug, clap::Args)]
struct Invocation {
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    /// Conversation JSON files, trace headers, or directories of them.
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let internal = e
        .chain()
        .filter_map(|c| c.downcast_ref::<roundattn::Error>())
        .any(|c| !c.is_input_error());
    if internal {
        3
    } else {
        2
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    let (kind, inv) = match command {
        Command::Analyze(i) => ("analyze", i),
        Command::Memory(i) => ("memory", i),
        Command::Run(i) => ("run", i),
        Command::Compare(i) => ("compare", i),
    };
    let s = Settings::load(inv.settings, inv.config.as_deref())?;
    let files = match kind {
        "memory" => Vec::new(),
        _ => collect_inputs(&inv.inputs)?,
    };
    let outputs = match kind {
        "analyze" => analyze(&s, &files)?,
        "memory" => memory(&s)?,
        "run" => run(&s, &files)?,
        _ => compare(&s, &files)?,
    };
    emit(s.out.as_deref(), &outputs)
}

/// Expands directories to their `.json` files, sorted by name.
fn collect_inputs(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    if paths.is_empty() {
        bail!("no input files given");
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(json_files(p)?);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no .json inputs found");
    }
    Ok(files)
}

fn json_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn input_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_input(path: &Path) -> anyhow::Result<AnalyzeInput> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let name = input_name(path);
    let doc: Value = serde_json::from_slice(&bytes)
        .map_err(|e| anyhow!("{}: not JSON: {e}", path.display()))?;
    if doc.get("round_boundaries").is_some() {
        let bin = path.with_extension("bin");
        let payload = fs::read(&bin).with_context(|| format!("reading trace payload {}", bin.display()))?;
        let header = std::str::from_utf8(&bytes)?;
        let trace = load_attention_trace(header, &payload).with_context(|| path.display().to_string())?;
        return Ok(AnalyzeInput::Trace { name, trace });
    }
    let conversation = parse_conversation(&bytes).with_context(|| path.display().to_string())?;
    Ok(AnalyzeInput::Conversation { name, conversation })
}

fn load_conversations(files: &[PathBuf]) -> anyhow::Result<Vec<(String, Conversation)>> {
    files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let conv = parse_conversation(&bytes).with_context(|| p.display().to_string())?;
            Ok((input_name(p), conv))
        })
        .collect()
}

fn criterion(s: &Settings) -> WatershedCriterion {
    match s.tau {
        Some(tau) => WatershedCriterion::Threshold { tau },
        None => WatershedCriterion::LargestDrop,
    }
}

/// Named output files; the first is the report.
type Outputs = Vec<(String, String)>;

fn analyze(s: &Settings, files: &[PathBuf]) -> anyhow::Result<Outputs> {
    let inputs = files.iter().map(|p| load_input(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let needs_model = inputs
        .iter()
        .any(|i| matches!(i, AnalyzeInput::Conversation { .. }));
    let model = if needs_model {
        Some(Model::new(s.model())?)
    } else {
        None
    };
    let report = cmd_analyze(&inputs, model.as_ref(), criterion(s))?;
    for skipped in &report.skipped {
        eprintln!("warning: skipped {}: {}", skipped.name, skipped.reason);
    }
    Ok(vec![
        ("analyze.json".into(), render(&report)?),
        ("kl_curve.csv".into(), kl_curve_csv(&report)),
        ("distributions.csv".into(), distributions_csv(&report)),
    ])
}

fn kl_curve_csv(report: &AnalyzeReport) -> String {
    let mut out = String::from("input,layer,value\n");
    let mut rows = |name: &str, values: &[f64]| {
        for (l, v) in values.iter().enumerate() {
            let _ = writeln!(out, "{name},{l},{v}");
        }
    };
    rows("mean", &report.watershed.mean_curve.values);
    for input in &report.inputs {
        rows(&input.name, &input.analysis.curve.values);
    }
    out
}

fn distributions_csv(report: &AnalyzeReport) -> String {
    let mut out = String::from("input,layer,segment,round,mass\n");
    for input in &report.inputs {
        let a = &input.analysis;
        for d in a.question.iter().chain(a.answer.iter().flatten()) {
            let segment = match d.segment {
                roundattn::Segment::Question => "question",
                roundattn::Segment::Answer => "answer",
            };
            for (r, m) in d.rounds.iter().zip(&d.masses) {
                let _ = writeln!(out, "{},{},{segment},{r},{m}", input.name, d.layer);
            }
        }
    }
    out
}

fn memory(s: &Settings) -> anyhow::Result<Outputs> {
    let params = match s.lw {
        None => None,
        Some(watershed) => {
            let model = s.model();
            let total = s.t.unwrap_or(1);
            Some(FootprintParams {
                batch: s.batch.unwrap_or(1),
                seq_len: s.seq_len.unwrap_or(1024),
                hidden: s.hidden.unwrap_or(model.d_model),
                layers: model.num_layers,
                watershed,
                kept: s.k.unwrap_or(total),
                total,
            })
        }
    };
    let report = cmd_memory(params.as_ref())?;
    Ok(vec![("memory.json".into(), render(&report)?)])
}

fn run_settings(s: &Settings) -> anyhow::Result<RunSettings> {
    let model = s.model();
    let policy = s.main_policy()?;
    let (watershed, source) = match (s.lw, &s.calibrate) {
        (Some(lw), None) => (lw, WatershedSource::Override),
        (None, Some(dir)) => {
            let corpus = load_conversations(&json_files(dir)?)?;
            let convs: Vec<Conversation> = corpus.into_iter().map(|(_, c)| c).collect();
            let m = Model::new(model.clone())?;
            let r = calibrate_watershed(&m, &convs, criterion(s))?;
            (
                r.lower_layers(),
                WatershedSource::Calibrated {
                    detected_layer: r.layer,
                    corpus_size: r.corpus_size,
                },
            )
        }
        _ => bail!("give exactly one of --lw and --calibrate"),
    };
    let mut settings = RunSettings::new(model, watershed, policy);
    settings.watershed_source = source;
    let d = DropPolicy::default();
    settings.drop = DropPolicy {
        window: match s.drop_window {
            Some(0) => None,
            Some(w) => Some(w),
            None => d.window,
        },
        protect_recent: s.drop_protect.unwrap_or(d.protect_recent),
    };
    if let Some(n) = s.max_decode {
        settings.max_decode_steps = n;
    }
    settings.teacher_forcing = !s.no_teacher_forcing;
    Ok(settings)
}

fn run(s: &Settings, files: &[PathBuf]) -> anyhow::Result<Outputs> {
    let settings = run_settings(s)?;
    let convs = load_conversations(files)?;
    let out = cmd_run(&settings, &convs)?;
    Ok(vec![
        ("run.json".into(), render(&out.report)?),
        ("costs.csv".into(), out.costs.to_csv()),
    ])
}

fn compare(s: &Settings, files: &[PathBuf]) -> anyhow::Result<Outputs> {
    let settings = run_settings(s)?;
    let convs = load_conversations(files)?;
    let policies = if s.policies.is_empty() {
        vec![StrategyArg::Baseline, s.strategy.unwrap_or(StrategyArg::Top), StrategyArg::Token]
    } else {
        s.policies.clone()
    };
    let mut modes = Vec::new();
    for p in policies {
        let mode = match s.policy(p)? {
            None => Mode::Baseline,
            Some(policy) => Mode::from_policy(policy),
        };
        if modes.contains(&mode) {
            bail!("policy {} listed twice", mode.name());
        }
        modes.push(mode);
    }
    let out = cmd_compare(&settings, &convs, &modes)?;
    let mut files = vec![
        ("compare.json".into(), render(&out.report)?),
        ("compare.csv".into(), compare_table_csv(&out.report)),
    ];
    for (name, curves) in &out.costs {
        files.push((format!("costs_{name}.csv"), curves.to_csv()));
    }
    Ok(files)
}

/// Writes every output under `out`, or prints the report to stdout.
fn emit(out: Option<&Path>, outputs: &Outputs) -> anyhow::Result<()> {
    let Some(dir) = out else {
        print!("{}", outputs[0].1);
        return Ok(());
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, text) in outputs {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
