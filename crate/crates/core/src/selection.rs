//! Round selection strategies, the inactive-round drop policy and a
//! token-granularity selector kept for comparison runs.

use serde::{Deserialize, Serialize};

use crate::conversation::Span;
use crate::engine::LayerAttention;
use crate::error::{Error, Result};
use crate::stats::RoundDistribution;

/// Strategy 1 default threshold on the normalized distribution.
pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Strategy 2 default fraction of prior rounds.
pub const DEFAULT_FRACTION: f64 = 0.1;
/// Strategy 3 default multiplier on the standard deviation.
pub const DEFAULT_KAPPA: f64 = 1.0;

// Absorbs decimal-to-binary error in `fraction * rounds` (0.1 * 30 must be 3).
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Keep rounds whose mass exceeds `v`.
    Fixed { v: f64 },
    /// Keep the `ceil(fraction * rounds)` heaviest rounds.
    TopPercent { fraction: f64 },
    /// Keep rounds above `mean + kappa * std`.
    Adaptive { kappa: f64 },
    /// Keep every round.
    All,
    /// Token-granularity comparator; selects tokens, not rounds.
    TokenBaseline,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fixed { .. } => "fixed",
            Strategy::TopPercent { .. } => "top",
            Strategy::Adaptive { .. } => "adaptive",
            Strategy::All => "all",
            Strategy::TokenBaseline => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub strategy: Strategy,
    pub min_rounds: usize,
}

impl SelectionPolicy {
    pub fn new(strategy: Strategy) -> Result<Self> {
        let policy = Self {
            strategy,
            min_rounds: 1,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn with_min_rounds(mut self, min_rounds: usize) -> Result<Self> {
        self.min_rounds = min_rounds;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_rounds < 1 {
            return Err(Error::InvalidPolicy("min_rounds must be at least 1".into()));
        }
        match self.strategy {
            Strategy::Fixed { v } if !(v > 0.0 && v < 1.0) => {
                Err(Error::InvalidPolicy(format!("threshold {v} outside (0, 1)")))
            }
            Strategy::TopPercent { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                Error::InvalidPolicy(format!("fraction {fraction} outside (0, 1]")),
            ),
            Strategy::Adaptive { kappa } if !kappa.is_finite() => {
                Err(Error::InvalidPolicy(format!("kappa {kappa} is not finite")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected round indices, ascending.
    pub kept: Vec<usize>,
    pub strategy: Strategy,
    /// Whether the strategy itself selected fewer than `min_rounds` and the
    /// heaviest remaining rounds were added.
    pub fell_back: bool,
    /// Normalized mass carried by the kept rounds.
    pub kept_mass: f64,
    pub rounds: Vec<usize>,
    pub masses: Vec<f64>,
}

impl SelectionResult {
    pub fn k(&self) -> usize {
        self.kept.len()
    }
}

/// Entry indices ordered by descending mass, smaller index first on ties.
fn ranked(masses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
    order
}

/// Number of rounds kept by [`Strategy::TopPercent`] out of `rounds`.
pub fn top_percent_count(fraction: f64, rounds: usize, min_rounds: usize) -> usize {
    let k = (fraction * rounds as f64 - CEIL_SLACK).ceil().max(0.0) as usize;
    k.max(min_rounds).min(rounds)
}

fn strategy_entries(masses: &[f64], strategy: Strategy, min_rounds: usize) -> Vec<usize> {
    match strategy {
        Strategy::Fixed { v } => (0..masses.len()).filter(|&i| masses[i] > v).collect(),
        Strategy::TopPercent { fraction } => {
            let k = top_percent_count(fraction, masses.len(), min_rounds);
            ranked(masses).into_iter().take(k).collect()
        }
        Strategy::Adaptive { kappa } => {
            let n = masses.len() as f64;
            let (lo, hi) = masses
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
                    (lo.min(m), hi.max(m))
                });
            if masses.is_empty() || hi - lo <= f64::EPSILON * hi.abs() {
                return Vec::new();
            }
            let mean = masses.iter().sum::<f64>() / n;
            let var = masses.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
            let cut = mean + kappa * var.sqrt();
            (0..masses.len()).filter(|&i| masses[i] > cut).collect()
        }
        Strategy::All | Strategy::TokenBaseline => (0..masses.len()).collect(),
    }
}

/// Applies `policy` to a round distribution.
pub fn select(dist: &RoundDistribution, policy: &SelectionPolicy) -> SelectionResult {
    let masses = &dist.masses;
    let mut entries = strategy_entries(masses, policy.strategy, policy.min_rounds);
    let want = policy.min_rounds.min(masses.len());
    let fell_back = entries.len() < want;
    if fell_back {
        for i in ranked(masses) {
            if entries.len() >= want {
                break;
            }
            if !entries.contains(&i) {
                entries.push(i);
            }
        }
    }
    entries.sort_unstable();
    let kept_mass = entries.iter().map(|&i| masses[i]).sum();
    SelectionResult {
        kept: entries.iter().map(|&i| dist.rounds[i]).collect(),
        strategy: policy.strategy,
        fell_back,
        kept_mass,
        rounds: dist.rounds.clone(),
        masses: masses.clone(),
    }
}

pub fn select_fixed(dist: &RoundDistribution, v: f64) -> SelectionResult {
    select(
        dist,
        &SelectionPolicy {
            strategy: Strategy::Fixed { v },
            min_rounds: 1,
        },
    )
}

pub fn select_top_percent(
    dist: &RoundDistribution,
    fraction: f64,
    min_rounds: usize,
) -> SelectionResult {
    select(
        dist,
        &SelectionPolicy {
            strategy: Strategy::TopPercent { fraction },
            min_rounds,
        },
    )
}

pub fn select_adaptive(dist: &RoundDistribution, kappa: f64) -> SelectionResult {
    select(
        dist,
        &SelectionPolicy {
            strategy: Strategy::Adaptive { kappa },
            min_rounds: 1,
        },
    )
}

/// Tokens chosen by the token-granularity comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSelection {
    /// Kept history positions, ascending.
    pub kept: Vec<usize>,
    /// Candidate history positions and their mean score over the query rows.
    pub positions: Vec<usize>,
    pub mean_scores: Vec<f64>,
    pub fell_back: bool,
}

impl TokenSelection {
    /// Number of maximal runs of consecutive kept positions.
    pub fn segments(&self) -> usize {
        contiguous_segments(&self.kept)
    }
}

/// Number of maximal runs of consecutive integers in an ascending list.
pub fn contiguous_segments(sorted: &[usize]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[1] != w[0] + 1).count()
}

/// Averages each history column over the rows of `query` and keeps the
/// columns strictly above the mean of those averages (argmax if none).
/// History is every key position before `query.start`.
pub fn select_token_baseline(scores: &LayerAttention, query: Span) -> Result<TokenSelection> {
    let rows: Vec<usize> = (0..scores.rows())
        .filter(|&r| query.contains(scores.query_positions[r]))
        .collect();
    if rows.len() != query.len() || rows.is_empty() {
        return Err(Error::SegmentRows(format!(
            "scores hold {} of {} query rows",
            rows.len(),
            query.len()
        )));
    }
    let cols: Vec<usize> = (0..scores.cols())
        .filter(|&c| scores.key_positions[c] < query.start)
        .collect();
    let mean_scores: Vec<f64> = cols
        .iter()
        .map(|&c| {
            rows.iter()
                .map(|&r| f64::from(scores.row(r)[c]))
                .sum::<f64>()
                / rows.len() as f64
        })
        .collect();
    let positions: Vec<usize> = cols.iter().map(|&c| scores.key_positions[c]).collect();
    if cols.is_empty() {
        return Ok(TokenSelection {
            kept: Vec::new(),
            positions,
            mean_scores,
            fell_back: false,
        });
    }
    let overall = mean_scores.iter().sum::<f64>() / mean_scores.len() as f64;
    let (lo, hi) = mean_scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
            (lo.min(m), hi.max(m))
        });
    let mut kept: Vec<usize> = if hi - lo <= f64::EPSILON * hi.abs() {
        Vec::new()
    } else {
        (0..cols.len())
            .filter(|&i| mean_scores[i] > overall)
            .map(|i| positions[i])
            .collect()
    };
    let fell_back = kept.is_empty();
    if fell_back {
        kept.push(positions[ranked(&mean_scores)[0]]);
    }
    kept.sort_unstable();
    Ok(TokenSelection {
        kept,
        positions,
        mean_scores,
        fell_back,
    })
}

/// Parameters of the inactive-round drop policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropPolicy {
    /// Turns without selection before a round is dropped; `None` disables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// The most recent rounds that are never dropped.
    pub protect_recent: usize,
}

impl Default for DropPolicy {
    fn default() -> Self {
        Self {
            window: Some(8),
            protect_recent: 2,
        }
    }
}

impl DropPolicy {
    pub fn disabled() -> Self {
        Self {
            window: None,
            protect_recent: 2,
        }
    }
}

/// Per-round activity: the turn each round was created or last selected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityLedger {
    last_active: Vec<usize>,
    dropped: Vec<bool>,
}

impl ActivityLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers round `round` created at `turn`; rounds must be added in order.
    pub fn register(&mut self, round: usize, turn: usize) {
        debug_assert_eq!(round, self.last_active.len());
        self.last_active.push(turn);
        self.dropped.push(false);
    }

    pub fn len(&self) -> usize {
        self.last_active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_active.is_empty()
    }

    pub fn is_dropped(&self, round: usize) -> bool {
        self.dropped.get(round).copied().unwrap_or(false)
    }

    pub fn last_active(&self, round: usize) -> Option<usize> {
        self.last_active.get(round).copied()
    }

    /// Rounds that are still eligible for selection.
    pub fn live_rounds(&self, before: usize) -> Vec<usize> {
        (0..before.min(self.len()))
            .filter(|&r| !self.dropped[r])
            .collect()
    }
}

/// Marks `kept` active at `turn`, then drops every live round that has gone
/// `window` turns without selection and is not among the `protect_recent`
/// newest rounds. Returns the newly dropped rounds.
pub fn update_activity_and_drop(
    ledger: &mut ActivityLedger,
    kept: &[usize],
    turn: usize,
    policy: &DropPolicy,
) -> Vec<usize> {
    for &r in kept {
        if let Some(slot) = ledger.last_active.get_mut(r) {
            *slot = turn;
        }
    }
    let Some(window) = policy.window else {
        return Vec::new();
    };
    let protected_from = ledger.len().saturating_sub(policy.protect_recent);
    let mut dropped = Vec::new();
    for r in 0..protected_from {
        if ledger.dropped[r] || kept.contains(&r) {
            continue;
        }
        if turn.saturating_sub(ledger.last_active[r]) >= window {
            ledger.dropped[r] = true;
            dropped.push(r);
        }
    }
    dropped
}
