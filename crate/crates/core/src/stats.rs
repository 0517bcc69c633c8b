//! Round-level attention statistics.
//!
//! For a current round `n` and one of its segments (question or answer),
//! the raw mass on prior round `k` at a layer is the sum of captured scores
//! from every segment token to every token of round `k`. Normalizing the raw
//! vector gives the per-layer round distribution; comparing distributions
//! across layers with KL divergence yields the curve used to locate the
//! watershed layer.

use serde::{Deserialize, Serialize};

use crate::conversation::Round;
use crate::engine::LayerAttention;
use crate::error::{Error, Result};

/// KL smoothing applied before renormalization.
pub const KL_EPSILON: f64 = 1e-10;

/// Default absolute threshold (nats) for [`WatershedCriterion::Threshold`].
pub const DEFAULT_WATERSHED_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Question,
    Answer,
}

impl Segment {
    pub fn span(self, round: &Round) -> crate::conversation::Span {
        match self {
            Segment::Question => round.q_span,
            Segment::Answer => round.a_span,
        }
    }
}

/// Normalized attention mass over a set of prior rounds at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDistribution {
    pub layer: usize,
    pub segment: Segment,
    /// Round index of each entry.
    pub rounds: Vec<usize>,
    pub raw: Vec<f64>,
    pub masses: Vec<f64>,
    /// Set when every raw entry was zero and `masses` fell back to uniform.
    pub degenerate: bool,
}

impl RoundDistribution {
    pub fn new(layer: usize, segment: Segment, rounds: Vec<usize>, raw: Vec<f64>) -> Result<Self> {
        if rounds.len() != raw.len() {
            return Err(Error::LengthMismatch {
                left: rounds.len(),
                right: raw.len(),
            });
        }
        let (masses, degenerate) = normalize(&raw)?;
        Ok(Self {
            layer,
            segment,
            rounds,
            raw,
            masses,
            degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

/// Divides by the total. An all-zero input becomes uniform and is flagged.
pub fn normalize(raw: &[f64]) -> Result<(Vec<f64>, bool)> {
    if let Some((index, &value)) = raw.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeMass { index, value });
    }
    let total: f64 = raw.iter().sum();
    if raw.is_empty() {
        return Ok((Vec::new(), true));
    }
    if total > 0.0 {
        Ok((raw.iter().map(|v| v / total).collect(), false))
    } else {
        let u = 1.0 / raw.len() as f64;
        Ok((vec![u; raw.len()], true))
    }
}

fn round_of_position(rounds: &[Round], position: usize) -> Option<usize> {
    rounds
        .binary_search_by(|r| {
            let s = r.span();
            if position < s.start {
                std::cmp::Ordering::Greater
            } else if position >= s.end {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Equal
            }
        })
        .ok()
}

/// Raw mass from the segment rows of round `current` onto each of the
/// `candidates` rounds (all prior rounds when `None`).
pub fn aggregate_round_attention_over(
    scores: &LayerAttention,
    rounds: &[Round],
    segment: Segment,
    current: usize,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    let round = rounds
        .get(current)
        .ok_or_else(|| Error::SegmentRows(format!("round {current} not in round list")))?;
    let span = segment.span(round);
    if span.is_empty() {
        return Err(Error::SegmentRows(format!(
            "{segment:?} segment of round {current} is empty"
        )));
    }
    if let Some(&bad) = candidates.iter().find(|&&k| k >= current) {
        return Err(Error::SegmentRows(format!(
            "round {bad} is not prior to round {current}"
        )));
    }
    // column -> slot in the output vector
    let mut slot_of_round = vec![usize::MAX; current];
    for (slot, &k) in candidates.iter().enumerate() {
        slot_of_round[k] = slot;
    }
    let col_slots: Vec<usize> = scores
        .key_positions
        .iter()
        .map(|&p| match round_of_position(rounds, p) {
            Some(k) if k < current => slot_of_round[k],
            _ => usize::MAX,
        })
        .collect();

    let mut raw = vec![0.0f64; candidates.len()];
    let mut seen = 0usize;
    for (row, &qp) in scores.query_positions.iter().enumerate() {
        if !span.contains(qp) {
            continue;
        }
        seen += 1;
        for (&slot, &v) in col_slots.iter().zip(scores.row(row)) {
            if slot != usize::MAX {
                raw[slot] += f64::from(v);
            }
        }
    }
    if seen != span.len() {
        return Err(Error::SegmentRows(format!(
            "scores hold {seen} of {} {segment:?} rows of round {current}",
            span.len()
        )));
    }
    Ok(raw)
}

/// Raw per-round mass over every prior round `0..current`.
pub fn aggregate_round_attention(
    scores: &LayerAttention,
    rounds: &[Round],
    segment: Segment,
    current: usize,
) -> Result<Vec<f64>> {
    let candidates: Vec<usize> = (0..current).collect();
    aggregate_round_attention_over(scores, rounds, segment, current, &candidates)
}

/// Builds the distribution for one captured layer.
pub fn round_distribution(
    scores: &LayerAttention,
    rounds: &[Round],
    segment: Segment,
    current: usize,
) -> Result<RoundDistribution> {
    let raw = aggregate_round_attention(scores, rounds, segment, current)?;
    RoundDistribution::new(scores.layer, segment, (0..current).collect(), raw)
}

/// Forward KL divergence in nats after epsilon smoothing and renormalization.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let n = p.len() as f64;
    let zp = p.iter().sum::<f64>() + n * epsilon;
    let zq = q.iter().sum::<f64>() + n * epsilon;
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let ps = (a + epsilon) / zp;
        let qs = (b + epsilon) / zq;
        if ps > 0.0 {
            kl += ps * (ps / qs).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Mean forward KL from each layer to every later layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub num_layers: usize,
    /// `values[l]` for `l in 0..num_layers - 1`.
    pub values: Vec<f64>,
}

pub fn kl_curve(per_layer: &[Vec<f64>]) -> Result<KlCurve> {
    let layers = per_layer.len();
    if layers < 2 {
        return Err(Error::TooFewLayers {
            need: 2,
            got: layers,
        });
    }
    let mut values = Vec::with_capacity(layers - 1);
    for l in 0..layers - 1 {
        let mut sum = 0.0;
        for later in &per_layer[l + 1..] {
            sum += kl_divergence(&per_layer[l], later, KL_EPSILON)?;
        }
        values.push(sum / (layers - 1 - l) as f64);
    }
    Ok(KlCurve {
        num_layers: layers,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum WatershedCriterion {
    /// Layer after the largest drop of the mean curve.
    #[default]
    LargestDrop,
    /// First layer whose mean curve value is at most `tau`.
    Threshold { tau: f64 },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatershedResult {
    /// First layer (0-based) whose distribution already matches the later
    /// layers.
    pub layer: usize,
    pub mean_curve: KlCurve,
    pub criterion: WatershedCriterion,
    pub corpus_size: usize,
}

impl WatershedResult {
    /// Number of layers that keep the full history: every layer up to and
    /// including the detected one, from whose scores rounds are selected.
    pub fn lower_layers(&self) -> usize {
        self.layer + 1
    }
}

/// Averages the corpus curves pointwise and picks the watershed layer.
///
/// Per-layer values are summed in sorted order so the mean, and hence the
/// result, does not depend on corpus order.
pub fn detect_watershed(
    curves: &[KlCurve],
    criterion: WatershedCriterion,
) -> Result<WatershedResult> {
    let first = curves.first().ok_or(Error::EmptyCorpus)?;
    let layers = first.num_layers;
    if let Some(c) = curves.iter().find(|c| c.num_layers != layers) {
        return Err(Error::LengthMismatch {
            left: layers,
            right: c.num_layers,
        });
    }
    if layers < 3 {
        return Err(Error::TooFewLayers {
            need: 3,
            got: layers,
        });
    }
    let mut column = Vec::with_capacity(curves.len());
    let mean: Vec<f64> = (0..layers - 1)
        .map(|l| {
            column.clear();
            column.extend(curves.iter().map(|c| c.values[l]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / curves.len() as f64
        })
        .collect();

    let layer = match criterion {
        WatershedCriterion::LargestDrop => {
            let mut best = 1;
            let mut best_drop = f64::NEG_INFINITY;
            for l in 1..layers - 1 {
                let drop = mean[l - 1] - mean[l];
                if drop > best_drop {
                    best_drop = drop;
                    best = l;
                }
            }
            best
        }
        WatershedCriterion::Threshold { tau } => (1..layers - 1)
            .find(|&l| mean[l] <= tau)
            .unwrap_or(layers - 1),
    };
    Ok(WatershedResult {
        layer,
        mean_curve: KlCurve {
            num_layers: layers,
            values: mean,
        },
        criterion,
        corpus_size: curves.len(),
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Two constant inputs correlate at 1 when equal; a single constant input
/// has no rank information and yields 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::Span;

    fn rounds(lens: &[(usize, usize)]) -> Vec<Round> {
        let mut pos = 0;
        lens.iter()
            .enumerate()
            .map(|(index, &(q, a))| {
                let r = Round {
                    index,
                    q_span: Span::new(pos, pos + q),
                    a_span: Span::new(pos + q, pos + q + a),
                };
                pos += q + a;
                r
            })
            .collect()
    }

    #[test]
    fn split_three_to_one() {
        // round 0: 3 tokens, round 1: 1 token, round 2: question of 1 token
        let rs = rounds(&[(2, 1), (1, 0), (1, 0)]);
        // trailing rounds only need their question; round 1 is complete only
        // by its question here, fine for aggregation.
        let s = 5;
        let mut scores = vec![0.0f32; s * s];
        for c in 0..4 {
            scores[4 * s + c] = 0.25;
        }
        let att = LayerAttention::full(0, s, scores);
        let raw = aggregate_round_attention(&att, &rs, Segment::Question, 2).unwrap();
        assert_eq!(raw, vec![0.75, 0.25]);
    }

    #[test]
    fn zero_block_gives_zero_vector() {
        let rs = rounds(&[(2, 2), (2, 0)]);
        let s = 6;
        let mut scores = vec![0.0f32; s * s];
        for r in 4..6 {
            scores[r * s + r] = 1.0;
        }
        let att = LayerAttention::full(0, s, scores);
        let raw = aggregate_round_attention(&att, &rs, Segment::Question, 1).unwrap();
        assert_eq!(raw, vec![0.0]);
        let d = RoundDistribution::new(0, Segment::Question, vec![0], raw).unwrap();
        assert!(d.degenerate);
    }

    #[test]
    fn missing_rows_and_empty_segment() {
        let rs = rounds(&[(2, 2), (2, 0)]);
        let att = LayerAttention {
            layer: 0,
            query_positions: vec![4],
            key_positions: (0..6).collect(),
            scores: vec![0.0; 6],
        };
        assert!(matches!(
            aggregate_round_attention(&att, &rs, Segment::Question, 1),
            Err(Error::SegmentRows(_))
        ));
        assert!(matches!(
            aggregate_round_attention(&att, &rs, Segment::Answer, 1),
            Err(Error::SegmentRows(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 2.0]).unwrap(), (vec![0.5, 0.5], false));
        let (u, flag) = normalize(&[0.0, 0.0, 0.0]).unwrap();
        assert!(flag);
        assert!(u.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(normalize(&[0.75, 0.25]).unwrap().0, vec![0.75, 0.25]);
        assert!(matches!(
            normalize(&[0.5, -0.1]),
            Err(Error::NegativeMass { index: 1, .. })
        ));
    }

    #[test]
    fn kl_identity_and_ln2() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p, KL_EPSILON).unwrap(), 0.0);
        let exact = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
        assert!((exact - std::f64::consts::LN_2).abs() < 1e-15);
        let smoothed = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], KL_EPSILON).unwrap();
        assert!((smoothed - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5], KL_EPSILON),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn kl_curve_composition() {
        let p0 = vec![0.7, 0.2, 0.1];
        let p1 = vec![0.1, 0.6, 0.3];
        let p2 = vec![0.3, 0.3, 0.4];
        let a = kl_divergence(&p0, &p1, KL_EPSILON).unwrap();
        let b = kl_divergence(&p0, &p2, KL_EPSILON).unwrap();
        let c = kl_divergence(&p1, &p2, KL_EPSILON).unwrap();
        let curve = kl_curve(&[p0, p1, p2]).unwrap();
        assert_eq!(curve.values.len(), 2);
        assert!((curve.values[0] - (a + b) / 2.0).abs() < 1e-15);
        assert!((curve.values[1] - c).abs() < 1e-15);
        assert!(matches!(
            kl_curve(&[vec![1.0]]),
            Err(Error::TooFewLayers { .. })
        ));
    }

    #[test]
    fn identical_layers_flat_zero() {
        let p = vec![0.25; 4];
        let curve = kl_curve(&vec![p; 6]).unwrap();
        assert!(curve.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_curve_ties_to_layer_one() {
        let curve = KlCurve {
            num_layers: 6,
            values: vec![0.4; 5],
        };
        let r = detect_watershed(&[curve], WatershedCriterion::LargestDrop).unwrap();
        assert_eq!(r.layer, 1);
    }

    #[test]
    fn threshold_criterion() {
        let curve = KlCurve {
            num_layers: 6,
            values: vec![2.0, 1.0, 0.5, 0.05, 0.01],
        };
        let r = detect_watershed(std::slice::from_ref(&curve), WatershedCriterion::Threshold { tau: 0.1 })
            .unwrap();
        assert_eq!(r.layer, 3);
        let r = detect_watershed(&[curve], WatershedCriterion::Threshold { tau: 1e-9 }).unwrap();
        assert_eq!(r.layer, 5);
    }

    #[test]
    fn watershed_errors() {
        assert!(matches!(
            detect_watershed(&[], WatershedCriterion::LargestDrop),
            Err(Error::EmptyCorpus)
        ));
        let short = KlCurve {
            num_layers: 2,
            values: vec![0.1],
        };
        assert!(matches!(
            detect_watershed(&[short], WatershedCriterion::LargestDrop),
            Err(Error::TooFewLayers { .. })
        ));
    }

    #[test]
    fn spearman_cases() {
        let a = [0.1, 0.5, 0.2, 0.2];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    }
}
