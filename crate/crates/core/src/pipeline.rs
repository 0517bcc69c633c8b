//! Per-turn execution of round-selective attention.
//!
//! A turn for question `q_n` runs in five stages:
//!
//! 1. bring the lower blocks of all prior rounds to device (one batch);
//! 2. prefill `q_n` through the lower layers, capturing the scores of the
//!    last lower layer;
//! 3. select the relevant prior rounds once from those scores and fetch
//!    their upper blocks (one batch);
//! 4. prefill `q_n` through the upper layers over the kept rounds only;
//! 5. greedily decode the answer with the same kept set, then write the
//!    round's new upper block and the fetched ones back (one batch).
//!
//! The same [`Session`] type also runs a full-history baseline and a
//! token-granularity comparator so outputs, costs and transfers can be
//! compared on identical inputs.

use serde::{Deserialize, Serialize};

use crate::conversation::{answer_tokens, question_tokens, Round, Span, ANSWER_SEP, EOT};
use crate::cost::{simulate_costs, CostCurves, CostModel, TurnShape};
use crate::engine::{AttentionMask, Capture, ForwardOptions, KvCache, LayerKv, Model};
use crate::error::{Error, Result};
use crate::memory::MODELED_ELEMENT_BYTES;
use crate::selection::{
    contiguous_segments, select, select_token_baseline, update_activity_and_drop, ActivityLedger,
    DropPolicy, SelectionPolicy, Strategy,
};
use crate::stats::{aggregate_round_attention_over, RoundDistribution, Segment};
use crate::store::{BlockKey, ConversationId, Half, TieredStore, TurnTransfers};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Mode {
    /// Round-selective attention over the tiered store.
    Round { policy: SelectionPolicy },
    /// Every layer attends to the full history held on device.
    Baseline,
    /// Upper layers attend to individually selected history tokens.
    Token,
}

impl Mode {
    pub fn name(&self) -> String {
        match self {
            Mode::Round { policy } => policy.strategy.name().to_string(),
            Mode::Baseline => "baseline".into(),
            Mode::Token => "token".into(),
        }
    }

    /// Maps a strategy to a mode; [`Strategy::TokenBaseline`] selects tokens.
    pub fn from_policy(policy: SelectionPolicy) -> Self {
        match policy.strategy {
            Strategy::TokenBaseline => Mode::Token,
            _ => Mode::Round { policy },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of lower layers `L_w`. Layers `0..L_w` attend to the whole
    /// history and rounds are selected from the scores of layer `L_w - 1`.
    pub watershed: usize,
    pub mode: Mode,
    pub drop: DropPolicy,
    pub max_decode_steps: usize,
    /// Stop decoding once the end-of-text token is produced.
    pub stop_at_eot: bool,
    pub cost: CostModel,
}

impl PipelineConfig {
    pub fn new(watershed: usize, mode: Mode) -> Self {
        Self {
            watershed,
            mode,
            drop: DropPolicy::default(),
            max_decode_steps: 16,
            stop_at_eot: true,
            cost: CostModel::default(),
        }
    }
}

/// Transfer counts of the token-granularity comparator, which moves every
/// contiguous run of kept tokens separately for each upper layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTransfers {
    pub segments: u64,
    pub layer_touches: u64,
    pub h2d_events: u64,
    pub h2d_bytes: u64,
    pub d2h_events: u64,
    pub d2h_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub round: usize,
    pub mode: String,
    pub history_rounds: usize,
    /// Live prior rounds offered to the selector.
    pub candidate_rounds: usize,
    pub kept: Vec<usize>,
    pub k: usize,
    pub selection_invocations: u32,
    pub dropped: Vec<usize>,
    pub query_tokens: usize,
    pub decode_steps: usize,
    /// Keys visible to the last question token below the watershed.
    pub lower_keys_attended: usize,
    /// Keys visible to the last question token at and above the watershed.
    pub upper_keys_attended: usize,
    pub transfers: TurnTransfers,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_transfers: Option<TokenTransfers>,
    pub shape: TurnShape,
    pub costs: CostCurves,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    /// Greedily generated answer tokens.
    pub answer: Vec<u32>,
    /// Logits of every decode step.
    pub step_logits: Vec<Vec<f32>>,
    pub metrics: TurnMetrics,
}

/// Visibility for upper layers restricted to `kept` rounds plus everything
/// from `current_start` on. Lower layers stay fully visible.
pub fn restricted_attention_mask(
    kept: &[usize],
    rounds: &[Round],
    current_start: usize,
    watershed: usize,
) -> AttentionMask {
    let mut visible = vec![false; current_start];
    for &k in kept {
        if let Some(r) = rounds.get(k) {
            for p in r.span().range().filter(|&p| p < current_start) {
                visible[p] = true;
            }
        }
    }
    AttentionMask {
        upper_from: watershed,
        visible,
    }
}

/// One conversation's state across turns.
#[derive(Debug, Clone)]
pub struct Session<'m> {
    model: &'m Model,
    id: ConversationId,
    config: PipelineConfig,
    rounds: Vec<Round>,
    tokens: Vec<u32>,
    activity: ActivityLedger,
    full_cache: Option<KvCache>,
}

fn split_block(payload: &[f32], tokens: usize, d: usize, offset: usize) -> (&[f32], &[f32]) {
    let n = tokens * d;
    let base = offset * 2 * n;
    (&payload[base..base + n], &payload[base + n..base + 2 * n])
}

fn pack_rows(cache: &KvCache, layers: std::ops::Range<usize>, from: usize) -> Result<(Vec<f32>, usize)> {
    let mut out = Vec::new();
    let mut tokens = 0;
    for l in layers {
        let kv = cache.layer(l)?;
        let rows = kv.filter(|p| p >= from);
        tokens = rows.len();
        out.extend_from_slice(rows.keys());
        out.extend_from_slice(rows.values());
    }
    Ok((out, tokens))
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, id: ConversationId, config: PipelineConfig) -> Result<Self> {
        let layers = model.num_layers();
        if !(0 < config.watershed && config.watershed < layers) {
            return Err(Error::Domain(format!(
                "watershed {} must lie strictly inside 0..{layers}",
                config.watershed
            )));
        }
        if let Mode::Round { policy } = &config.mode {
            policy.validate()?;
        }
        if !config.cost.is_valid() {
            return Err(Error::Domain("cost model entries must be finite and >= 0".into()));
        }
        let full_cache = match config.mode {
            Mode::Round { .. } => None,
            Mode::Baseline | Mode::Token => Some(model.empty_cache()),
        };
        Ok(Self {
            model,
            id,
            config,
            rounds: Vec::new(),
            tokens: Vec::new(),
            activity: ActivityLedger::new(),
            full_cache,
        })
    }

    pub fn id(&self) -> ConversationId {
        self.id
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn activity(&self) -> &ActivityLedger {
        &self.activity
    }

    /// Runs one turn. `recorded` replaces the generated answer in the stored
    /// history, so paired runs over the same conversation see the same
    /// context; without it the generated answer is kept.
    pub fn run_turn(
        &mut self,
        store: &mut TieredStore,
        question: &str,
        recorded: Option<&str>,
    ) -> Result<TurnOutput> {
        if self.config.max_decode_steps == 0 {
            return Err(Error::InvalidDecodeSteps);
        }
        match self.config.mode {
            Mode::Round { policy } => self.round_turn(store, &policy, question, recorded),
            Mode::Baseline => self.full_turn(question, recorded, false),
            Mode::Token => self.full_turn(question, recorded, true),
        }
    }

    fn current_rounds(&self, q_span: Span) -> Vec<Round> {
        let mut rounds = self.rounds.clone();
        rounds.push(Round {
            index: rounds.len(),
            q_span,
            a_span: Span::new(q_span.end, q_span.end),
        });
        rounds
    }

    fn history_tokens(&self, rounds: &[usize]) -> usize {
        rounds.iter().map(|&r| self.rounds[r].token_count()).sum()
    }

    /// Greedy decode followed by committing the stored answer rows.
    fn decode_and_commit(
        &self,
        cache: &mut KvCache,
        decode_start: usize,
        mask: Option<&AttentionMask>,
        recorded: Option<&str>,
    ) -> Result<(Vec<u32>, Vec<Vec<f32>>, Vec<u32>)> {
        let mut input = ANSWER_SEP;
        let mut pos = decode_start;
        let mut answer = Vec::new();
        let mut step_logits = Vec::new();
        for _ in 0..self.config.max_decode_steps {
            let out = self.model.decode_step(cache, input, pos, mask)?;
            pos += 1;
            answer.push(out.token);
            step_logits.push(out.logits);
            if self.config.stop_at_eot && out.token == EOT {
                break;
            }
            input = out.token;
        }
        let opts = ForwardOptions {
            capture: Capture::None,
            mask,
        };
        let stored = match recorded {
            Some(text) => {
                cache.truncate_from(decode_start);
                let ids = answer_tokens(text);
                let mut acts = self.model.embed(&ids, decode_start)?;
                self.model
                    .forward_range(&mut acts, cache, 0..self.model.num_layers(), &opts)?;
                ids
            }
            None => {
                let last = *answer.last().ok_or(Error::InvalidDecodeSteps)?;
                let mut acts = self.model.embed(&[last], pos)?;
                self.model
                    .forward_range(&mut acts, cache, 0..self.model.num_layers(), &opts)?;
                let mut ids = vec![ANSWER_SEP];
                ids.extend_from_slice(&answer);
                ids
            }
        };
        Ok((answer, step_logits, stored))
    }

    fn finish_round(&mut self, q_span: Span, stored_answer: &[u32], question: &[u32]) {
        let a_start = q_span.end;
        let round = Round {
            index: self.rounds.len(),
            q_span,
            a_span: Span::new(a_start, a_start + stored_answer.len()),
        };
        self.tokens.extend_from_slice(question);
        self.tokens.extend_from_slice(stored_answer);
        self.rounds.push(round);
    }

    fn round_turn(
        &mut self,
        store: &mut TieredStore,
        policy: &SelectionPolicy,
        question: &str,
        recorded: Option<&str>,
    ) -> Result<TurnOutput> {
        let model = self.model;
        let layers = model.num_layers();
        let d = model.d_model();
        let w = self.config.watershed;
        let n = self.rounds.len();
        let geometry = *store.geometry();
        if geometry.num_layers != layers || geometry.watershed != w || geometry.d_model != d {
            return Err(Error::Domain(format!(
                "store geometry {geometry:?} does not match the session"
            )));
        }

        store.begin_turn(self.id, n);
        let history: Vec<usize> = (0..n).collect();
        // step 1
        store.fetch_lower_all(self.id, &history)?;
        let mut cache = KvCache::new(layers, d);
        for m in &history {
            let key = BlockKey::new(self.id, *m, Half::Lower);
            let payload = store.device_payload(&key)?;
            let span = self.rounds[*m].span();
            for l in 0..w {
                let (k, v) = split_block(payload, span.len(), d, l);
                let positions: Vec<usize> = span.range().collect();
                cache.layer_mut(l)?.append(k, v, &positions);
            }
        }

        // step 2
        let q_ids = question_tokens(question);
        let start = self.tokens.len();
        let q_span = Span::new(start, start + q_ids.len());
        let mut acts = model.embed(&q_ids, start)?;
        let capture = if n > 0 {
            Capture::Layers(vec![w - 1])
        } else {
            Capture::None
        };
        let caps = model.forward_range(&mut acts, &mut cache, 0..w, &ForwardOptions::capture(capture))?;

        // step 3
        let candidates = self.activity.live_rounds(n);
        let mut kept = Vec::new();
        let mut selection_invocations = 0;
        let mut selection_cells = 0u64;
        if let Some(cap) = caps.first() {
            if !candidates.is_empty() {
                let rounds = self.current_rounds(q_span);
                let raw = aggregate_round_attention_over(cap, &rounds, Segment::Question, n, &candidates)?;
                let dist = RoundDistribution::new(cap.layer, Segment::Question, candidates.clone(), raw)?;
                kept = select(&dist, policy).kept;
                selection_invocations = 1;
                selection_cells = (q_ids.len() * self.history_tokens(&candidates)) as u64;
            }
        }
        store.fetch_upper(self.id, &kept)?;
        for m in &kept {
            let key = BlockKey::new(self.id, *m, Half::Upper);
            let payload = store.device_payload(&key)?;
            let span = self.rounds[*m].span();
            let positions: Vec<usize> = span.range().collect();
            for l in w..layers {
                let (k, v) = split_block(payload, span.len(), d, l - w);
                cache.layer_mut(l)?.append(k, v, &positions);
            }
        }

        // step 4
        model.forward_range(&mut acts, &mut cache, w..layers, &ForwardOptions::default())?;

        // step 5
        let (answer, step_logits, stored) =
            self.decode_and_commit(&mut cache, q_span.end, None, recorded)?;

        let (lower, tokens) = pack_rows(&cache, 0..w, start)?;
        let (upper, _) = pack_rows(&cache, w..layers, start)?;
        store.put_round_resident(self.id, n, tokens, lower, upper)?;
        let mut writeback = kept.clone();
        writeback.push(n);
        store.writeback_upper(self.id, &writeback)?;

        self.finish_round(q_span, &stored, &q_ids);
        self.activity.register(n, n);
        let dropped = update_activity_and_drop(&mut self.activity, &kept, n, &self.config.drop);
        store.drop_upper(self.id, &dropped)?;
        let transfers = store
            .end_turn()
            .ok_or_else(|| Error::Invariant("turn tally missing".into()))?;

        let history_tokens = self.history_tokens(&history);
        let kept_tokens = self.history_tokens(&kept);
        let shape = TurnShape {
            num_layers: layers,
            watershed: Some(w),
            d_model: d,
            query_tokens: q_ids.len(),
            lower_history: history_tokens,
            upper_history: kept_tokens,
            decode_steps: answer.len(),
            selection_cells,
            lower_h2d_bytes: transfers.lower_h2d_bytes,
            upper_h2d_bytes: transfers.upper_h2d_bytes,
            d2h_bytes: transfers.d2h_bytes,
        };
        let metrics = TurnMetrics {
            round: n,
            mode: self.config.mode.name(),
            history_rounds: n,
            candidate_rounds: candidates.len(),
            k: kept.len(),
            kept,
            selection_invocations,
            dropped,
            query_tokens: q_ids.len(),
            decode_steps: answer.len(),
            lower_keys_attended: history_tokens + q_ids.len(),
            upper_keys_attended: kept_tokens + q_ids.len(),
            transfers,
            token_transfers: None,
            costs: simulate_costs(&shape, &self.config.cost),
            shape,
        };
        Ok(TurnOutput {
            answer,
            step_logits,
            metrics,
        })
    }

    /// Baseline and token-comparator turns; both keep the whole cache on
    /// device and differ only in the upper-layer mask.
    fn full_turn(&mut self, question: &str, recorded: Option<&str>, token_select: bool) -> Result<TurnOutput> {
        let model = self.model;
        let layers = model.num_layers();
        let d = model.d_model();
        let w = self.config.watershed;
        let n = self.rounds.len();
        let mut cache = self
            .full_cache
            .take()
            .ok_or_else(|| Error::Invariant("full-history session without a cache".into()))?;

        let q_ids = question_tokens(question);
        let start = self.tokens.len();
        let q_span = Span::new(start, start + q_ids.len());
        let history_tokens = start;

        let mut acts = model.embed(&q_ids, start)?;
        let capture = if token_select && n > 0 {
            Capture::Layers(vec![w - 1])
        } else {
            Capture::None
        };
        let caps = model.forward_range(&mut acts, &mut cache, 0..w, &ForwardOptions::capture(capture))?;

        let mut selection_invocations = 0;
        let mut selection_cells = 0u64;
        let mut kept_positions: Vec<usize> = Vec::new();
        let mask = match caps.first() {
            Some(cap) => {
                let sel = select_token_baseline(cap, q_span)?;
                selection_invocations = 1;
                selection_cells = (q_ids.len() * history_tokens) as u64;
                kept_positions = sel.kept;
                let mut visible = vec![false; start];
                for &p in &kept_positions {
                    visible[p] = true;
                }
                Some(AttentionMask {
                    upper_from: w,
                    visible,
                })
            }
            None => None,
        };
        let opts = ForwardOptions {
            capture: Capture::None,
            mask: mask.as_ref(),
        };
        model.forward_range(&mut acts, &mut cache, w..layers, &opts)?;
        let decoded = self.decode_and_commit(&mut cache, q_span.end, mask.as_ref(), recorded);
        let (answer, step_logits, stored) = match decoded {
            Ok(v) => v,
            Err(e) => {
                self.full_cache = Some(cache);
                return Err(e);
            }
        };
        let round_tokens = q_ids.len() + stored.len();
        self.full_cache = Some(cache);
        self.finish_round(q_span, &stored, &q_ids);
        self.activity.register(n, n);

        let upper_layers = (layers - w) as u64;
        let resident = 2 * MODELED_ELEMENT_BYTES * (self.tokens.len() * d * layers) as u64;
        let (kept_tokens, token_transfers) = if token_select {
            let segments = contiguous_segments(&kept_positions) as u64;
            let per_token = 2 * MODELED_ELEMENT_BYTES * d as u64 * upper_layers;
            let t = TokenTransfers {
                segments,
                layer_touches: segments * upper_layers,
                h2d_events: segments * upper_layers,
                h2d_bytes: kept_positions.len() as u64 * per_token,
                d2h_events: upper_layers,
                d2h_bytes: round_tokens as u64 * per_token,
            };
            (kept_positions.len(), Some(t))
        } else {
            (history_tokens, None)
        };
        let transfers = TurnTransfers {
            conversation: self.id.0,
            turn: n,
            device_used_bytes: resident,
            device_peak_bytes: resident,
            ..TurnTransfers::default()
        };
        let mut shape = TurnShape::baseline(layers, d, q_ids.len(), history_tokens, answer.len());
        if let Some(t) = &token_transfers {
            shape.watershed = Some(w);
            shape.upper_history = kept_tokens;
            shape.selection_cells = selection_cells;
            shape.upper_h2d_bytes = t.h2d_bytes;
            shape.d2h_bytes = t.d2h_bytes;
        }
        let metrics = TurnMetrics {
            round: n,
            mode: self.config.mode.name(),
            history_rounds: n,
            candidate_rounds: n,
            kept: if token_select { Vec::new() } else { (0..n).collect() },
            k: if token_select { 0 } else { n },
            selection_invocations,
            dropped: Vec::new(),
            query_tokens: q_ids.len(),
            decode_steps: answer.len(),
            lower_keys_attended: history_tokens + q_ids.len(),
            upper_keys_attended: kept_tokens + q_ids.len(),
            transfers,
            token_transfers,
            costs: simulate_costs(&shape, &self.config.cost),
            shape,
        };
        Ok(TurnOutput {
            answer,
            step_logits,
            metrics,
        })
    }

    /// Full-history cache of a baseline or token session.
    pub fn full_cache(&self) -> Option<&KvCache> {
        self.full_cache.as_ref()
    }
}

/// A cache whose upper layers hold only the rows of `kept` rounds and rows
/// at or after `current_start`; lower layers are copied unchanged.
pub fn splice_cache(
    cache: &KvCache,
    kept: &[usize],
    rounds: &[Round],
    current_start: usize,
    watershed: usize,
) -> Result<KvCache> {
    let mut out = cache.clone();
    for l in watershed..cache.num_layers() {
        let kv: LayerKv = cache.layer(l)?.filter(|p| {
            p >= current_start
                || kept
                    .iter()
                    .any(|&k| rounds.get(k).is_some_and(|r| r.span().contains(p)))
        });
        out.set_layer(l, kv)?;
    }
    Ok(out)
}
