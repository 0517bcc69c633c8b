//! Versioned reports produced by the command-line front end, and the
//! commands that build them.
//!
//! Every report is a JSON object with `schema_version` and `kind` fields.
//! Optional fields are omitted rather than written as `null`, so a `null`
//! anywhere in a rendered report means a non-finite number slipped in.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{analyze_trace, trace_conversation, SequenceAnalysis};
use crate::conversation::{AttentionTrace, Conversation};
use crate::cost::{CostCurves, CostModel};
use crate::engine::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::memory::{
    footprint_report, memory_ratio, reference_models, reference_schema_version, save_percent,
    FootprintParams,
};
use crate::pipeline::{Mode, PipelineConfig, Session};
use crate::selection::{DropPolicy, SelectionPolicy};
use crate::stats::{detect_watershed, WatershedCriterion, WatershedResult};
use crate::store::{ConversationId, StoreGeometry, TieredStore, TurnTransfers, DEFAULT_DEVICE_CAPACITY};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Analyze,
    Memory,
    Run,
    Compare,
}

fn find_null(value: &Value, path: &mut String) -> bool {
    match value {
        Value::Null => true,
        Value::Array(items) => items.iter().enumerate().any(|(i, v)| {
            let len = path.len();
            let _ = write!(path, "[{i}]");
            let found = find_null(v, path);
            if !found {
                path.truncate(len);
            }
            found
        }),
        Value::Object(map) => map.iter().any(|(k, v)| {
            let len = path.len();
            let _ = write!(path, ".{k}");
            let found = find_null(v, path);
            if !found {
                path.truncate(len);
            }
            found
        }),
        _ => false,
    }
}

/// Checks the report envelope and that every number is finite.
pub fn validate_report(value: &Value) -> Result<ReportKind> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Invariant("report is not a JSON object".into()))?;
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        other => {
            return Err(Error::Invariant(format!(
                "unsupported schema_version {other:?}"
            )))
        }
    }
    let kind: ReportKind = obj
        .get("kind")
        .cloned()
        .ok_or_else(|| Error::Invariant("report has no kind".into()))
        .and_then(|k| serde_json::from_value(k).map_err(Error::from))?;
    let mut path = String::new();
    if find_null(value, &mut path) {
        return Err(Error::Invariant(format!("non-finite number at {path}")));
    }
    Ok(kind)
}

/// Pretty JSON text of a validated report, newline terminated.
pub fn render<T: Serialize>(report: &T) -> Result<String> {
    let value = serde_json::to_value(report)?;
    validate_report(&value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyzeInput {
    Conversation { name: String, conversation: Conversation },
    Trace { name: String, trace: AttentionTrace },
}

impl AnalyzeInput {
    pub fn name(&self) -> &str {
        match self {
            AnalyzeInput::Conversation { name, .. } | AnalyzeInput::Trace { name, .. } => name,
        }
    }

    fn rounds(&self) -> usize {
        match self {
            AnalyzeInput::Conversation { conversation, .. } => conversation.rounds.len(),
            AnalyzeInput::Trace { trace, .. } => trace.rounds.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputReport {
    pub name: String,
    pub rounds: usize,
    pub layers: usize,
    #[serde(flatten)]
    pub analysis: SequenceAnalysis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub inputs: Vec<InputReport>,
    pub skipped: Vec<SkippedInput>,
    pub watershed: WatershedResult,
    /// Lower-layer count a pipeline run derives from `watershed`.
    pub lower_layers: usize,
}

/// Per-input round statistics and the corpus watershed. Conversations are
/// traced with `model`; single-round inputs are skipped and listed.
pub fn cmd_analyze(
    inputs: &[AnalyzeInput],
    model: Option<&Model>,
    criterion: WatershedCriterion,
) -> Result<AnalyzeReport> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for input in inputs {
        if input.rounds() < 2 {
            skipped.push(SkippedInput {
                name: input.name().to_string(),
                reason: format!("{} round(s); at least 2 are needed", input.rounds()),
            });
            continue;
        }
        let traced;
        let trace = match input {
            AnalyzeInput::Trace { trace, .. } => trace,
            AnalyzeInput::Conversation { conversation, .. } => {
                let model = model.ok_or_else(|| {
                    Error::Domain("conversation inputs need a model to trace".into())
                })?;
                traced = trace_conversation(model, conversation)?;
                &traced
            }
        };
        reports.push(InputReport {
            name: input.name().to_string(),
            rounds: trace.rounds.len(),
            layers: trace.num_layers(),
            analysis: analyze_trace(trace)?,
        });
    }
    if reports.is_empty() {
        return Err(Error::NoMultiRoundInput);
    }
    let curves: Vec<_> = reports.iter().map(|r| r.analysis.curve.clone()).collect();
    let watershed = detect_watershed(&curves, criterion)?;
    let uses_model = inputs
        .iter()
        .any(|i| matches!(i, AnalyzeInput::Conversation { .. }));
    Ok(AnalyzeReport {
        schema_version: SCHEMA_VERSION,
        kind: ReportKind::Analyze,
        model: model.filter(|_| uses_model).map(|m| m.config().clone()),
        inputs: reports,
        skipped,
        lower_layers: watershed.lower_layers(),
        watershed,
    })
}

// ----------------------------------------------------------------- memory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintSection {
    pub params: FootprintParams,
    pub ratio: f64,
    pub m_orig: u64,
    pub m_round: f64,
    /// Saving at the given `kept / total`, whole percent rounded half up.
    pub save_percent: u64,
    /// Saving as `kept / total` goes to zero.
    pub limit_save_percent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub family: String,
    pub size: String,
    pub layers: usize,
    pub watershed: usize,
    pub reported_save_percent: u64,
    pub save_percent: u64,
    pub limit_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<FootprintSection>,
    pub reference_schema_version: u32,
    pub reference: Vec<ReferenceRow>,
}

/// Saving `1 - ratio` in whole percent, rounding halves up, computed on the
/// exact rational `(total - kept)(layers - watershed) / (total * layers)`.
pub fn save_percent_at(layers: usize, watershed: usize, kept: usize, total: usize) -> Result<u64> {
    memory_ratio(layers, watershed, kept, total)?;
    let num = ((total - kept) * (layers - watershed)) as u64;
    let den = (total * layers) as u64;
    Ok((200 * num + den) / (2 * den))
}

/// Footprint of one parameter set (when given) next to the bundled
/// reference rows.
pub fn cmd_memory(params: Option<&FootprintParams>) -> Result<MemoryReport> {
    let footprint = match params {
        Some(p) => {
            let f = footprint_report(p)?;
            Some(FootprintSection {
                params: *p,
                ratio: f.ratio,
                m_orig: f.m_orig,
                m_round: f.m_round,
                save_percent: save_percent_at(p.layers, p.watershed, p.kept, p.total)?,
                limit_save_percent: save_percent(p.layers, p.watershed)?,
            })
        }
        None => None,
    };
    let reference = reference_models()?
        .into_iter()
        .map(|m| {
            Ok(ReferenceRow {
                save_percent: save_percent(m.layers, m.watershed)?,
                limit_ratio: memory_ratio(m.layers, m.watershed, 0, 1)?,
                family: m.family,
                size: m.size,
                layers: m.layers,
                watershed: m.watershed,
                reported_save_percent: m.save_percent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MemoryReport {
        schema_version: SCHEMA_VERSION,
        kind: ReportKind::Memory,
        footprint,
        reference_schema_version: reference_schema_version(),
        reference,
    })
}

// -------------------------------------------------------------------- run

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum WatershedSource {
    Override,
    Calibrated { detected_layer: usize, corpus_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub watershed: usize,
    pub watershed_source: WatershedSource,
    pub policy: SelectionPolicy,
    pub cost: CostModel,
    pub drop: DropPolicy,
    pub max_decode_steps: usize,
    /// Store recorded answers as history instead of generated ones.
    pub teacher_forcing: bool,
    pub device_capacity: u64,
}

impl RunSettings {
    pub fn new(model: ModelConfig, watershed: usize, policy: SelectionPolicy) -> Self {
        Self {
            model,
            watershed,
            watershed_source: WatershedSource::Override,
            policy,
            cost: CostModel::default(),
            drop: DropPolicy::default(),
            max_decode_steps: 16,
            teacher_forcing: true,
            device_capacity: DEFAULT_DEVICE_CAPACITY,
        }
    }

    fn pipeline(&self, mode: Mode) -> PipelineConfig {
        PipelineConfig {
            watershed: self.watershed,
            mode,
            drop: self.drop,
            max_decode_steps: self.max_decode_steps,
            stop_at_eot: true,
            cost: self.cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub round: usize,
    pub answer: String,
    pub answer_tokens: Vec<u32>,
    pub kept: Vec<usize>,
    pub k: usize,
    pub dropped: Vec<usize>,
    pub selection_invocations: u32,
    pub query_tokens: usize,
    pub decode_steps: usize,
    pub history_tokens: usize,
    pub lower_keys_attended: usize,
    pub upper_keys_attended: usize,
    pub transfers: TurnTransfers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_transfers: Option<crate::pipeline::TokenTransfers>,
    pub compute_us: f64,
    pub transfer_us: f64,
    pub total_us: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub turns: usize,
    pub turns_with_history: usize,
    pub selection_invocations: u64,
    /// Host-to-device events: store events, or per-segment events for the
    /// token comparator.
    pub h2d_events: u64,
    pub upper_h2d_events: u64,
    pub max_h2d_events_per_turn: u64,
    pub h2d_bytes: u64,
    pub d2h_events: u64,
    pub d2h_bytes: u64,
    pub token_segments: u64,
    pub layer_touches: u64,
    pub kept_rounds: u64,
    pub history_tokens: u64,
    pub upper_history_tokens: u64,
    pub upper_keys_attended: u64,
    pub peak_device_bytes: u64,
    pub compute_us: f64,
    pub transfer_us: f64,
    pub total_us: f64,
}

impl RunTotals {
    fn add(&mut self, t: &TurnRecord, upper_history: usize) {
        self.turns += 1;
        self.turns_with_history += usize::from(t.history_tokens > 0);
        self.selection_invocations += u64::from(t.selection_invocations);
        let (h2d, h2d_bytes, d2h, d2h_bytes) = match &t.token_transfers {
            Some(x) => {
                self.token_segments += x.segments;
                self.layer_touches += x.layer_touches;
                (x.h2d_events, x.h2d_bytes, x.d2h_events, x.d2h_bytes)
            }
            None => (
                t.transfers.h2d_events,
                t.transfers.h2d_bytes,
                t.transfers.d2h_events,
                t.transfers.d2h_bytes,
            ),
        };
        self.h2d_events += h2d;
        self.max_h2d_events_per_turn = self.max_h2d_events_per_turn.max(h2d);
        self.h2d_bytes += h2d_bytes;
        self.d2h_events += d2h;
        self.d2h_bytes += d2h_bytes;
        self.upper_h2d_events += t.transfers.upper_h2d_events;
        self.kept_rounds += t.k as u64;
        self.history_tokens += t.history_tokens as u64;
        self.upper_history_tokens += upper_history as u64;
        self.upper_keys_attended += t.upper_keys_attended as u64;
        self.peak_device_bytes = self.peak_device_bytes.max(t.transfers.device_peak_bytes);
        self.compute_us += t.compute_us;
        self.transfer_us += t.transfer_us;
        self.total_us += t.total_us;
    }

    fn merge(&mut self, o: &RunTotals) {
        self.turns += o.turns;
        self.turns_with_history += o.turns_with_history;
        self.selection_invocations += o.selection_invocations;
        self.h2d_events += o.h2d_events;
        self.upper_h2d_events += o.upper_h2d_events;
        self.max_h2d_events_per_turn = self.max_h2d_events_per_turn.max(o.max_h2d_events_per_turn);
        self.h2d_bytes += o.h2d_bytes;
        self.d2h_events += o.d2h_events;
        self.d2h_bytes += o.d2h_bytes;
        self.token_segments += o.token_segments;
        self.layer_touches += o.layer_touches;
        self.kept_rounds += o.kept_rounds;
        self.history_tokens += o.history_tokens;
        self.upper_history_tokens += o.upper_history_tokens;
        self.upper_keys_attended += o.upper_keys_attended;
        self.peak_device_bytes = self.peak_device_bytes.max(o.peak_device_bytes);
        self.compute_us += o.compute_us;
        self.transfer_us += o.transfer_us;
        self.total_us += o.total_us;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub name: String,
    pub conversation_id: u64,
    pub turns: Vec<TurnRecord>,
    pub totals: RunTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub seed: u64,
    pub mode: String,
    pub settings: RunSettings,
    pub conversations: Vec<ConversationRecord>,
    pub totals: RunTotals,
}

/// A finished run: the report, summed cost curves and every generated
/// answer, indexed by conversation then turn.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub costs: CostCurves,
    pub answers: Vec<Vec<Vec<u32>>>,
}

fn add_curves(acc: &mut Option<CostCurves>, c: &CostCurves) {
    match acc {
        None => *acc = Some(c.clone()),
        Some(a) => {
            for (x, y) in a.entries.iter_mut().zip(&c.entries) {
                x.compute_us += y.compute_us;
                x.transfer_us += y.transfer_us;
            }
            a.compute_us += c.compute_us;
            a.transfer_us += c.transfer_us;
            a.total_us += c.total_us;
        }
    }
}

/// Runs every turn of every conversation under `mode`, sharing one store.
pub fn run_mode(
    model: &Model,
    settings: &RunSettings,
    mode: Mode,
    conversations: &[(String, Conversation)],
) -> Result<RunOutput> {
    let geometry = StoreGeometry::new(model.num_layers(), settings.watershed, model.d_model())?;
    let mut store = TieredStore::new(geometry, settings.device_capacity);
    let mut records = Vec::new();
    let mut answers = Vec::new();
    let mut totals = RunTotals::default();
    let mut curves = None;
    for (i, (name, conversation)) in conversations.iter().enumerate() {
        let id = ConversationId(i as u64);
        let mut session = Session::new(model, id, settings.pipeline(mode))?;
        let mut turns = Vec::new();
        let mut conv_answers = Vec::new();
        let mut conv_totals = RunTotals::default();
        for ex in &conversation.exchanges {
            let recorded = if settings.teacher_forcing {
                ex.answer.as_deref()
            } else {
                None
            };
            let out = session.run_turn(&mut store, &ex.question, recorded)?;
            let m = &out.metrics;
            add_curves(&mut curves, &m.costs);
            let record = TurnRecord {
                round: m.round,
                answer: String::from_utf8_lossy(&crate::conversation::decode(&out.answer)).into_owned(),
                answer_tokens: out.answer.clone(),
                kept: m.kept.clone(),
                k: m.k,
                dropped: m.dropped.clone(),
                selection_invocations: m.selection_invocations,
                query_tokens: m.query_tokens,
                decode_steps: m.decode_steps,
                history_tokens: m.shape.lower_history,
                lower_keys_attended: m.lower_keys_attended,
                upper_keys_attended: m.upper_keys_attended,
                transfers: m.transfers.clone(),
                token_transfers: m.token_transfers,
                compute_us: m.costs.compute_us,
                transfer_us: m.costs.transfer_us,
                total_us: m.costs.total_us,
            };
            conv_totals.add(&record, m.shape.upper_history);
            turns.push(record);
            conv_answers.push(out.answer);
        }
        if matches!(mode, Mode::Round { .. }) {
            store.end_session(id)?;
        }
        totals.merge(&conv_totals);
        records.push(ConversationRecord {
            name: name.clone(),
            conversation_id: id.0,
            turns,
            totals: conv_totals,
        });
        answers.push(conv_answers);
    }
    store.check_accounting()?;
    let costs = curves.unwrap_or(CostCurves {
        entries: Vec::new(),
        compute_us: 0.0,
        transfer_us: 0.0,
        total_us: 0.0,
    });
    Ok(RunOutput {
        report: RunReport {
            schema_version: SCHEMA_VERSION,
            kind: ReportKind::Run,
            seed: settings.model.seed,
            mode: mode.name(),
            settings: settings.clone(),
            conversations: records,
            totals,
        },
        costs,
        answers,
    })
}

/// Runs the configured policy end to end.
pub fn cmd_run(settings: &RunSettings, conversations: &[(String, Conversation)]) -> Result<RunOutput> {
    let model = Model::new(settings.model.clone())?;
    run_mode(&model, settings, Mode::from_policy(settings.policy), conversations)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    /// Generated tokens that differ from the baseline, position by
    /// position, with length differences counted as divergent.
    pub divergence_tokens: u64,
    pub diverged_turns: u64,
    /// Share of history tokens hidden from the upper layers.
    pub attended_reduction: f64,
    pub mean_k: f64,
    #[serde(flatten)]
    pub totals: RunTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub seed: u64,
    pub settings: RunSettings,
    pub policies: Vec<PolicySummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutput {
    pub report: CompareReport,
    /// Summed cost curves per policy, in report order.
    pub costs: Vec<(String, CostCurves)>,
}

fn divergence(a: &[u32], b: &[u32]) -> u64 {
    let common = a.iter().zip(b).filter(|(x, y)| x != y).count();
    (common + a.len().abs_diff(b.len())) as u64
}

/// Paired runs of every mode over the same conversations, each compared
/// with a full-history baseline run.
pub fn cmd_compare(
    settings: &RunSettings,
    conversations: &[(String, Conversation)],
    modes: &[Mode],
) -> Result<CompareOutput> {
    if modes.len() < 2 {
        return Err(Error::Domain("compare needs at least two policies".into()));
    }
    let model = Model::new(settings.model.clone())?;
    let baseline = run_mode(&model, settings, Mode::Baseline, conversations)?;
    let mut policies = Vec::new();
    let mut costs = Vec::new();
    for &mode in modes {
        let run = if mode == Mode::Baseline {
            baseline.clone()
        } else {
            run_mode(&model, settings, mode, conversations)?
        };
        let mut tokens = 0;
        let mut turns = 0;
        for (conv, base) in run.answers.iter().zip(&baseline.answers) {
            for (a, b) in conv.iter().zip(base) {
                let d = divergence(a, b);
                tokens += d;
                turns += u64::from(d > 0);
            }
        }
        let t = run.report.totals.clone();
        let attended_reduction = if t.history_tokens == 0 {
            0.0
        } else {
            1.0 - t.upper_history_tokens as f64 / t.history_tokens as f64
        };
        let with_history = t.turns_with_history.max(1) as f64;
        policies.push(PolicySummary {
            policy: mode.name(),
            divergence_tokens: tokens,
            diverged_turns: turns,
            attended_reduction,
            mean_k: t.kept_rounds as f64 / with_history,
            totals: t,
        });
        costs.push((mode.name(), run.costs));
    }
    Ok(CompareOutput {
        report: CompareReport {
            schema_version: SCHEMA_VERSION,
            kind: ReportKind::Compare,
            seed: settings.model.seed,
            settings: settings.clone(),
            policies,
        },
        costs,
    })
}

/// One row per policy: `policy,tokens_attended,cost,h2d_bytes,d2h_bytes,h2d_events,divergence_tokens`.
pub fn compare_table_csv(report: &CompareReport) -> String {
    let mut out =
        String::from("policy,tokens_attended,cost,h2d_bytes,d2h_bytes,h2d_events,divergence_tokens\n");
    for p in &report.policies {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.policy,
            p.totals.upper_keys_attended,
            p.totals.total_us,
            p.totals.h2d_bytes,
            p.totals.d2h_bytes,
            p.totals.h2d_events,
            p.divergence_tokens
        );
    }
    out
}
