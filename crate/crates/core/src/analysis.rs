//! Per-layer round statistics of whole sequences and watershed calibration.

use serde::{Deserialize, Serialize};

use crate::conversation::{AttentionTrace, Conversation};
use crate::engine::{Capture, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::stats::{
    detect_watershed, kl_curve, round_distribution, spearman, KlCurve, RoundDistribution, Segment,
    WatershedCriterion, WatershedResult,
};

/// Runs the full sequence of `conversation` through `model` and records the
/// head-reduced scores of every layer.
pub fn trace_conversation(model: &Model, conversation: &Conversation) -> Result<AttentionTrace> {
    let tokens = conversation.token_ids();
    let mut cache = model.empty_cache();
    let (_, layers) = model.prefill(&tokens, 0, &mut cache, &ForwardOptions::capture(Capture::All))?;
    Ok(AttentionTrace {
        seq_len: tokens.len(),
        rounds: conversation.rounds.clone(),
        layers,
    })
}

/// Round statistics of the final round of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAnalysis {
    pub current_round: usize,
    /// Question-to-history distribution of every layer.
    pub question: Vec<RoundDistribution>,
    /// Answer-to-history distribution of every layer, when the final round
    /// has an answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Vec<RoundDistribution>>,
    /// Per-layer Spearman correlation between the two.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<Vec<f64>>,
    pub curve: KlCurve,
}

/// Analyzes the last round of a trace against all earlier rounds.
pub fn analyze_trace(trace: &AttentionTrace) -> Result<SequenceAnalysis> {
    if trace.rounds.len() < 2 {
        return Err(Error::NoMultiRoundInput);
    }
    let current = trace.rounds.len() - 1;
    let question = trace
        .layers
        .iter()
        .map(|l| round_distribution(l, &trace.rounds, Segment::Question, current))
        .collect::<Result<Vec<_>>>()?;
    let answer = if trace.rounds[current].a_span.is_empty() {
        None
    } else {
        Some(
            trace
                .layers
                .iter()
                .map(|l| round_distribution(l, &trace.rounds, Segment::Answer, current))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let spearman = match &answer {
        Some(a) => Some(
            question
                .iter()
                .zip(a)
                .map(|(q, a)| spearman(&q.masses, &a.masses))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let masses: Vec<Vec<f64>> = question.iter().map(|d| d.masses.clone()).collect();
    let curve = kl_curve(&masses)?;
    Ok(SequenceAnalysis {
        current_round: current,
        question,
        answer,
        spearman,
        curve,
    })
}

/// Detects the watershed from a corpus of traces; single-round traces are
/// skipped.
pub fn calibrate_from_traces(
    traces: &[AttentionTrace],
    criterion: WatershedCriterion,
) -> Result<WatershedResult> {
    let mut curves = Vec::new();
    for t in traces.iter().filter(|t| t.rounds.len() >= 2) {
        curves.push(analyze_trace(t)?.curve);
    }
    if curves.is_empty() {
        return Err(Error::NoMultiRoundInput);
    }
    detect_watershed(&curves, criterion)
}

/// Detects the watershed of `model` over a conversation corpus.
pub fn calibrate_watershed(
    model: &Model,
    conversations: &[Conversation],
    criterion: WatershedCriterion,
) -> Result<WatershedResult> {
    if model.num_layers() < 3 {
        return Err(Error::TooFewLayers {
            need: 3,
            got: model.num_layers(),
        });
    }
    let mut traces = Vec::new();
    for c in conversations.iter().filter(|c| c.rounds.len() >= 2) {
        traces.push(trace_conversation(model, c)?);
    }
    calibrate_from_traces(&traces, criterion)
}
