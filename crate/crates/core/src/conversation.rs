//! Conversations, rounds and attention-trace ingestion.
//!
//! A conversation is a sequence of rounds, each a (question, answer) pair of
//! token spans. Text is tokenized byte-wise; three special ids follow the 256
//! byte ids and mark round/answer boundaries and end of text.
//!
//! Attention traces are the sidecar format used to analyze dumped score
//! matrices: a JSON header plus `layers` consecutive `seq_len x seq_len`
//! row-major little-endian `f32` matrices.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::LayerAttention;
use crate::error::{Error, Result};

/// Marker that opens every question span.
pub const ROUND_SEP: u32 = 256;
/// Marker that opens every answer span.
pub const ANSWER_SEP: u32 = 257;
/// End-of-text marker; closes recorded answers and stops greedy decoding.
pub const EOT: u32 = 258;
/// Byte ids plus the three markers.
pub const VOCAB_SIZE: usize = 259;

/// Maps each UTF-8 byte to one token id in `[0, 256)`.
pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize_bytes`]. Marker ids carry no bytes and are skipped.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

/// Half-open token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub position: usize,
}

/// One question/answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub index: usize,
    pub q_span: Span,
    pub a_span: Span,
}

impl Round {
    /// Full extent of the round, question and answer together.
    pub fn span(&self) -> Span {
        Span::new(self.q_span.start, self.a_span.end)
    }

    pub fn token_count(&self) -> usize {
        self.q_span.len() + self.a_span.len()
    }

    pub fn is_complete(&self) -> bool {
        !self.a_span.is_empty()
    }
}

/// The text of one round as it appears in the source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: String,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conversation {
    pub exchanges: Vec<Exchange>,
    pub rounds: Vec<Round>,
    pub tokens: Vec<Token>,
}

/// Token ids of a question span: the round marker followed by the text bytes.
pub fn question_tokens(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(ROUND_SEP);
    ids.extend(tokenize(text));
    ids
}

/// Token ids of a recorded answer span: answer marker, text bytes, end of text.
pub fn answer_tokens(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(ANSWER_SEP);
    ids.extend(tokenize(text));
    ids.push(EOT);
    ids
}

impl Conversation {
    /// Lays out token spans for the given exchanges. Only the last exchange
    /// may lack an answer.
    pub fn from_exchanges(exchanges: Vec<Exchange>) -> Result<Self> {
        let mut rounds = Vec::with_capacity(exchanges.len());
        let mut ids: Vec<u32> = Vec::new();
        for (index, ex) in exchanges.iter().enumerate() {
            if ex.answer.is_none() && index + 1 != exchanges.len() {
                return Err(Error::Structure {
                    index,
                    message: "only the final round may be unanswered".into(),
                });
            }
            let q_start = ids.len();
            ids.extend(question_tokens(&ex.question));
            let a_start = ids.len();
            if let Some(answer) = &ex.answer {
                ids.extend(answer_tokens(answer));
            }
            rounds.push(Round {
                index,
                q_span: Span::new(q_start, a_start),
                a_span: Span::new(a_start, ids.len()),
            });
        }
        let tokens = ids
            .into_iter()
            .enumerate()
            .map(|(position, id)| Token { id, position })
            .collect();
        Ok(Self {
            exchanges,
            rounds,
            tokens,
        })
    }

    /// Number of completed rounds.
    pub fn completed_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.is_complete()).count()
    }

    /// The unanswered trailing round, if any.
    pub fn in_flight(&self) -> Option<&Round> {
        self.rounds.last().filter(|r| !r.is_complete())
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    System,
    Human,
    Assistant,
}

fn message_role(index: usize, msg: &serde_json::Map<String, Value>) -> Result<Role> {
    let role = msg
        .get("from")
        .or_else(|| msg.get("role"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse {
            index,
            message: "missing string field \"from\"".into(),
        })?;
    match role {
        "human" | "user" => Ok(Role::Human),
        "gpt" | "assistant" | "chatgpt" | "bard" | "model" => Ok(Role::Assistant),
        "system" => Ok(Role::System),
        other => Err(Error::Parse {
            index,
            message: format!("unknown role {other:?}"),
        }),
    }
}

fn message_text(index: usize, msg: &serde_json::Map<String, Value>) -> Result<String> {
    msg.get("value")
        .or_else(|| msg.get("content"))
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Parse {
            index,
            message: "missing string field \"value\"".into(),
        })
}

/// Parses a ShareGPT-style document: either a bare list of
/// `{"from", "value"}` messages or an object holding such a list under
/// `"conversations"` (or `"messages"`).
///
/// A leading system message is folded into the first question.
pub fn parse_conversation(bytes: &[u8]) -> Result<Conversation> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        index: 0,
        message: format!("invalid document: {e}"),
    })?;
    let messages = match &doc {
        Value::Array(items) => items,
        Value::Object(obj) => obj
            .get("conversations")
            .or_else(|| obj.get("messages"))
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse {
                index: 0,
                message: "object document without a \"conversations\" list".into(),
            })?,
        _ => {
            return Err(Error::Parse {
                index: 0,
                message: "document is neither a list nor an object".into(),
            })
        }
    };

    let mut system: Option<String> = None;
    let mut exchanges: Vec<Exchange> = Vec::new();
    let mut last_role: Option<Role> = None;
    for (index, item) in messages.iter().enumerate() {
        let msg = item.as_object().ok_or_else(|| Error::Parse {
            index,
            message: "message is not an object".into(),
        })?;
        let role = message_role(index, msg)?;
        let text = message_text(index, msg)?;
        match role {
            Role::System => {
                if index != 0 {
                    return Err(Error::Structure {
                        index,
                        message: "system message after the first position".into(),
                    });
                }
                system = Some(text);
            }
            Role::Human => {
                if last_role == Some(Role::Human) {
                    return Err(Error::Structure {
                        index,
                        message: "two consecutive human messages".into(),
                    });
                }
                let question = match (exchanges.is_empty(), system.take()) {
                    (true, Some(sys)) => format!("{sys}\n\n{text}"),
                    _ => text,
                };
                exchanges.push(Exchange {
                    question,
                    answer: None,
                });
            }
            Role::Assistant => {
                match last_role {
                    Some(Role::Assistant) => {
                        return Err(Error::Structure {
                            index,
                            message: "two consecutive assistant messages".into(),
                        })
                    }
                    Some(Role::Human) => {}
                    _ => {
                        return Err(Error::Structure {
                            index,
                            message: "assistant message without a preceding question".into(),
                        })
                    }
                }
                if let Some(ex) = exchanges.last_mut() {
                    ex.answer = Some(text);
                }
            }
        }
        last_role = Some(role);
    }
    Conversation::from_exchanges(exchanges)
}

/// Sidecar header of an attention trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub layers: usize,
    pub seq_len: usize,
    /// `[q_start, q_end, a_start, a_end]` per round.
    pub round_boundaries: Vec<[usize; 4]>,
    #[serde(default = "default_element_width")]
    pub element_width: usize,
}

fn default_element_width() -> usize {
    4
}

/// Head-reduced per-layer score matrices over one full sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub seq_len: usize,
    pub rounds: Vec<Round>,
    pub layers: Vec<LayerAttention>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            layers: self.layers.len(),
            seq_len: self.seq_len,
            round_boundaries: self
                .rounds
                .iter()
                .map(|r| [r.q_span.start, r.q_span.end, r.a_span.start, r.a_span.end])
                .collect(),
            element_width: 4,
        }
    }

    /// Serializes to the sidecar pair `(header JSON, payload bytes)`.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let header = serde_json::to_string_pretty(&self.header())?;
        let mut payload = Vec::with_capacity(self.layers.len() * self.seq_len * self.seq_len * 4);
        for layer in &self.layers {
            if layer.scores.len() != self.seq_len * self.seq_len {
                return Err(Error::Shape(format!(
                    "layer {} is not a full {}x{} matrix",
                    layer.layer, self.seq_len, self.seq_len
                )));
            }
            for v in &layer.scores {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok((header, payload))
    }
}

fn rounds_from_boundaries(bounds: &[[usize; 4]], seq_len: usize) -> Result<Vec<Round>> {
    let mut expected_start = 0;
    let mut rounds = Vec::with_capacity(bounds.len());
    for (index, &[qs, qe, as_, ae]) in bounds.iter().enumerate() {
        let ok = qs == expected_start && qs < qe && qe == as_ && as_ <= ae && ae <= seq_len;
        if !ok {
            return Err(Error::TraceHeader(format!(
                "round {index} boundaries {:?} do not tile the sequence",
                [qs, qe, as_, ae]
            )));
        }
        if as_ == ae && index + 1 != bounds.len() {
            return Err(Error::TraceHeader(format!(
                "round {index} has an empty answer but is not the last round"
            )));
        }
        rounds.push(Round {
            index,
            q_span: Span::new(qs, qe),
            a_span: Span::new(as_, ae),
        });
        expected_start = ae;
    }
    if expected_start != seq_len {
        return Err(Error::TraceHeader(format!(
            "rounds cover {expected_start} of {seq_len} tokens"
        )));
    }
    Ok(rounds)
}

/// Row-sum tolerance enforced when loading traces.
pub const TRACE_ROW_TOLERANCE: f64 = 1e-3;

/// Parses and validates a trace from its header text and binary payload.
pub fn load_attention_trace(header: &str, payload: &[u8]) -> Result<AttentionTrace> {
    let header: TraceHeader =
        serde_json::from_str(header).map_err(|e| Error::TraceHeader(e.to_string()))?;
    if header.element_width != 4 {
        return Err(Error::TraceHeader(format!(
            "unsupported element width {}",
            header.element_width
        )));
    }
    if header.layers == 0 || header.seq_len == 0 {
        return Err(Error::TraceHeader("layers and seq_len must be positive".into()));
    }
    let s = header.seq_len;
    let expected = header
        .layers
        .checked_mul(s)
        .and_then(|v| v.checked_mul(s))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::TraceHeader("dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::TraceLength {
            expected,
            actual: payload.len(),
        });
    }
    let rounds = rounds_from_boundaries(&header.round_boundaries, s)?;

    let mut layers = Vec::with_capacity(header.layers);
    for (layer, chunk) in payload.chunks_exact(s * s * 4).enumerate() {
        let scores: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        for row in 0..s {
            let cells = &scores[row * s..(row + 1) * s];
            let mut sum = 0.0f64;
            for (col, &value) in cells.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(Error::TraceIntegrity {
                        layer,
                        row,
                        sum: f64::from(value),
                    });
                }
                if col > row && value != 0.0 {
                    return Err(Error::TraceCausality {
                        layer,
                        row,
                        col,
                        value,
                    });
                }
                sum += f64::from(value);
            }
            if (sum - 1.0).abs() > TRACE_ROW_TOLERANCE {
                return Err(Error::TraceIntegrity { layer, row, sum });
            }
        }
        layers.push(LayerAttention::full(layer, s, scores));
    }
    Ok(AttentionTrace {
        seq_len: s,
        rounds,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sharegpt(pairs: usize, trailing: bool) -> String {
        let mut msgs = Vec::new();
        for i in 0..pairs {
            msgs.push(serde_json::json!({"from": "human", "value": format!("q{i}")}));
            msgs.push(serde_json::json!({"from": "gpt", "value": format!("answer {i}")}));
        }
        if trailing {
            msgs.push(serde_json::json!({"from": "human", "value": "next?"}));
        }
        serde_json::to_string(&msgs).unwrap()
    }

    #[test]
    fn three_pairs() {
        let conv = parse_conversation(sharegpt(3, false).as_bytes()).unwrap();
        assert_eq!(conv.completed_rounds(), 3);
        assert_eq!(conv.rounds.len(), 3);
        assert!(conv.in_flight().is_none());
    }

    #[test]
    fn trailing_question_is_in_flight() {
        let conv = parse_conversation(sharegpt(3, true).as_bytes()).unwrap();
        assert_eq!(conv.completed_rounds(), 3);
        let q = conv.in_flight().unwrap();
        assert_eq!(q.index, 3);
        // marker + "next?"
        assert_eq!(q.q_span.len(), 6);
        assert!(q.a_span.is_empty());
    }

    #[test]
    fn empty_list() {
        let conv = parse_conversation(b"[]").unwrap();
        assert_eq!(conv.completed_rounds(), 0);
        assert!(conv.is_empty());
    }

    #[test]
    fn spans_tile_tokens() {
        let conv = parse_conversation(sharegpt(4, true).as_bytes()).unwrap();
        let mut owner = vec![0usize; conv.len()];
        for r in &conv.rounds {
            for p in r.q_span.range().chain(r.a_span.range()) {
                owner[p] += 1;
            }
        }
        assert!(owner.iter().all(|&c| c == 1));
        let total: usize = conv.rounds.iter().map(Round::token_count).sum();
        assert_eq!(total, conv.len());
        assert!(conv.tokens.windows(2).all(|w| w[0].position < w[1].position));
    }

    #[test]
    fn wrapped_document_and_system_prompt() {
        let doc = serde_json::json!({
            "id": "x",
            "conversations": [
                {"from": "system", "value": "be brief"},
                {"from": "human", "value": "hi"},
                {"from": "gpt", "value": "hello"}
            ]
        });
        let conv = parse_conversation(doc.to_string().as_bytes()).unwrap();
        assert_eq!(conv.completed_rounds(), 1);
        assert_eq!(conv.exchanges[0].question, "be brief\n\nhi");
    }

    #[test]
    fn consecutive_roles_are_structure_errors() {
        let doc = r#"[{"from":"human","value":"a"},{"from":"human","value":"b"}]"#;
        match parse_conversation(doc.as_bytes()) {
            Err(Error::Structure { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let doc = r#"[{"from":"human","value":"a"},{"from":"gpt","value":"b"},{"from":"gpt","value":"c"}]"#;
        assert!(matches!(
            parse_conversation(doc.as_bytes()),
            Err(Error::Structure { index: 2, .. })
        ));
        let doc = r#"[{"from":"gpt","value":"b"}]"#;
        assert!(matches!(
            parse_conversation(doc.as_bytes()),
            Err(Error::Structure { index: 0, .. })
        ));
    }

    #[test]
    fn malformed_message_reports_index() {
        let doc = r#"[{"from":"human","value":"a"},{"from":"gpt"}]"#;
        assert!(matches!(
            parse_conversation(doc.as_bytes()),
            Err(Error::Parse { index: 1, .. })
        ));
        assert!(matches!(
            parse_conversation(b"{not json"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("AB"), vec![65, 66]);
        assert_eq!(decode(&[ROUND_SEP, 65, 66, EOT]), b"AB");
    }

    fn identity_trace_payload(layers: usize, s: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for _ in 0..layers {
            for row in 0..s {
                for col in 0..s {
                    let v: f32 = if col <= row { 1.0 / (row + 1) as f32 } else { 0.0 };
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    const HEADER: &str = r#"{"layers":2,"seq_len":3,"round_boundaries":[[0,1,1,2],[2,3,3,3]]}"#;

    #[test]
    fn load_well_formed_trace() {
        let trace = load_attention_trace(HEADER, &identity_trace_payload(2, 3)).unwrap();
        assert_eq!(trace.num_layers(), 2);
        assert_eq!(trace.rounds.len(), 2);
        assert_eq!(trace.layers[1].scores.len(), 9);
    }

    #[test]
    fn short_payload_is_length_error() {
        let mut payload = identity_trace_payload(2, 3);
        payload.pop();
        assert!(matches!(
            load_attention_trace(HEADER, &payload),
            Err(Error::TraceLength {
                expected: 72,
                actual: 71
            })
        ));
    }

    #[test]
    fn half_row_is_integrity_error() {
        let mut payload = identity_trace_payload(2, 3);
        // layer 1, row 2 -> every entry halved
        let base = (9 + 6) * 4;
        for col in 0..3 {
            let off = base + col * 4;
            let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) * 0.5;
            payload[off..off + 4].copy_from_slice(&v.to_le_bytes());
        }
        match load_attention_trace(HEADER, &payload) {
            Err(Error::TraceIntegrity { layer, row, sum }) => {
                assert_eq!((layer, row), (1, 2));
                assert!((sum - 0.5).abs() < 1e-6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn upper_triangle_mass_is_rejected() {
        let mut payload = identity_trace_payload(1, 2);
        // row 0: [0.5, 0.5]
        payload[0..4].copy_from_slice(&0.5f32.to_le_bytes());
        payload[4..8].copy_from_slice(&0.5f32.to_le_bytes());
        let header = r#"{"layers":1,"seq_len":2,"round_boundaries":[[0,1,1,2]]}"#;
        assert!(matches!(
            load_attention_trace(header, &payload),
            Err(Error::TraceCausality { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn encode_roundtrip() {
        let trace = load_attention_trace(HEADER, &identity_trace_payload(2, 3)).unwrap();
        let (header, payload) = trace.encode().unwrap();
        assert_eq!(load_attention_trace(&header, &payload).unwrap(), trace);
    }
}
