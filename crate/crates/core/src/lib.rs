//! Round-granularity KV-cache selection for multi-turn conversations.
//!
//! Attention from a new question to earlier rounds is summed per round and
//! normalized. Past a watershed layer those per-round distributions stop
//! changing across depth, so the relevant rounds can be picked once there and
//! only their upper-layer KV blocks fetched from host memory.
//!
//! Modules, bottom up:
//!
//! - [`conversation`]: tokenizer, round spans, conversation and trace input
//! - [`engine`]: a small decoder-only transformer with a layer-range forward
//! - [`stats`]: per-round attention mass, cross-layer KL, watershed detection
//! - [`selection`]: round selection strategies and the drop policy
//! - [`store`]: two-tier block store with a transfer ledger
//! - [`memory`], [`cost`]: closed-form footprint and simulated latency
//! - [`pipeline`]: per-turn execution and the full-history baseline
//! - [`analysis`], [`report`]: corpus analysis and versioned reports

pub mod analysis;
pub mod conversation;
pub mod cost;
pub mod engine;
pub mod error;
pub mod memory;
pub mod pipeline;
pub mod report;
pub mod selection;
pub mod stats;
pub mod store;
pub mod synthetic;

pub use conversation::{
    parse_conversation, AttentionTrace, Conversation, Exchange, Round, Span, ANSWER_SEP, EOT,
    ROUND_SEP, VOCAB_SIZE,
};
pub use cost::{simulate_costs, CostCurves, CostModel, Phase, Step, TurnShape};
pub use engine::{AttentionMask, HeadReduction, KvCache, LayerAttention, Model, ModelConfig};
pub use error::{Error, Result};
pub use memory::{footprint_report, memory_ratio, save_percent, FootprintParams};
pub use pipeline::{Mode, PipelineConfig, Session, TurnMetrics, TurnOutput};
pub use selection::{DropPolicy, SelectionPolicy, SelectionResult, Strategy};
pub use stats::{detect_watershed, RoundDistribution, Segment, WatershedCriterion, WatershedResult};
pub use store::{ConversationId, StoreGeometry, TieredStore};
