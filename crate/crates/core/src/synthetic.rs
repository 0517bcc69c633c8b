//! Deterministic synthetic inputs: conversations of controlled size and
//! attention traces with a planted watershed layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conversation::{AttentionTrace, Conversation, Exchange, Round, Span};
use crate::engine::LayerAttention;
use crate::error::{Error, Result};

fn words(rng: &mut ChaCha8Rng, bytes: usize) -> String {
    let mut s = String::with_capacity(bytes);
    while s.len() < bytes {
        if !s.is_empty() && rng.random_bool(0.2) {
            s.push(' ');
        } else {
            s.push(char::from(b'a' + rng.random_range(0..26u8)));
        }
    }
    s
}

/// `rounds` exchanges whose question and answer texts have exactly the given
/// byte lengths.
pub fn synthetic_exchanges(
    rounds: usize,
    question_bytes: usize,
    answer_bytes: usize,
    seed: u64,
) -> Vec<Exchange> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds)
        .map(|_| Exchange {
            question: words(&mut rng, question_bytes),
            answer: Some(words(&mut rng, answer_bytes)),
        })
        .collect()
}

pub fn synthetic_conversation(
    rounds: usize,
    question_bytes: usize,
    answer_bytes: usize,
    seed: u64,
) -> Result<Conversation> {
    Conversation::from_exchanges(synthetic_exchanges(rounds, question_bytes, answer_bytes, seed))
}

/// Per-layer round distributions with a planted watershed at `watershed`:
/// every layer below it concentrates on its own round, every layer at or
/// above it shares one distribution up to `noise`.
pub fn planted_distributions(
    layers: usize,
    watershed: usize,
    rounds: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(0 < watershed && watershed < layers) || rounds < 2 {
        return Err(Error::Domain(format!(
            "need 0 < watershed ({watershed}) < layers ({layers}) and rounds ({rounds}) >= 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared: Vec<f64> = (0..rounds).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut p: Vec<f64> = if l < watershed {
            let peak = l % rounds;
            (0..rounds)
                .map(|k| if k == peak { 0.8 } else { 0.2 / (rounds - 1) as f64 })
                .collect()
        } else {
            shared.clone()
        };
        for v in &mut p {
            *v *= 1.0 + noise * rng.random_range(-1.0..1.0);
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        out.push(p);
    }
    Ok(out)
}

/// A full trace whose final round attends to earlier rounds with the given
/// per-layer masses, spread evenly over each round's tokens. All other rows
/// attend uniformly to their causal prefix.
///
/// `round_lens` gives `(question, answer)` token counts; the final round's
/// question and answer rows both follow `masses`.
pub fn trace_with_masses(round_lens: &[(usize, usize)], masses: &[Vec<f64>]) -> Result<AttentionTrace> {
    let n = round_lens.len();
    if n < 2 {
        return Err(Error::NoMultiRoundInput);
    }
    let mut rounds = Vec::with_capacity(n);
    let mut pos = 0;
    for (index, &(q, a)) in round_lens.iter().enumerate() {
        if q == 0 || (a == 0 && index + 1 != n) {
            return Err(Error::Domain(format!("round {index} has empty spans")));
        }
        rounds.push(Round {
            index,
            q_span: Span::new(pos, pos + q),
            a_span: Span::new(pos + q, pos + q + a),
        });
        pos += q + a;
    }
    let seq_len = pos;
    let current = rounds[n - 1];
    let layers = masses
        .iter()
        .enumerate()
        .map(|(layer, p)| {
            if p.len() != n - 1 {
                return Err(Error::LengthMismatch {
                    left: p.len(),
                    right: n - 1,
                });
            }
            let mut scores = vec![0.0f32; seq_len * seq_len];
            for i in 0..seq_len {
                let row = &mut scores[i * seq_len..(i + 1) * seq_len];
                if current.span().contains(i) {
                    for (k, r) in rounds[..n - 1].iter().enumerate() {
                        let share = (p[k] / r.token_count() as f64) as f32;
                        for j in r.span().range() {
                            row[j] = share;
                        }
                    }
                } else {
                    let share = 1.0 / (i + 1) as f32;
                    row[..=i].iter_mut().for_each(|v| *v = share);
                }
            }
            Ok(LayerAttention::full(layer, seq_len, scores))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace {
        seq_len,
        rounds,
        layers,
    })
}

/// A corpus of traces sharing one planted watershed layer. Round counts and
/// lengths vary per trace.
pub fn planted_corpus(
    layers: usize,
    watershed: usize,
    traces: usize,
    seed: u64,
) -> Result<Vec<AttentionTrace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..traces)
        .map(|i| {
            let n = rng.random_range(5..=9);
            let lens: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.random_range(2..=5), rng.random_range(2..=5)))
                .collect();
            let masses = planted_distributions(layers, watershed, n - 1, 0.02, seed ^ (i as u64 + 1))?;
            trace_with_masses(&lens, &masses)
        })
        .collect()
}
