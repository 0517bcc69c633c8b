//! Simulated per-layer latency of one turn.
//!
//! Each layer's attention is split into four calls (qkv projection with
//! rotary encoding, cache update, attention, output projection) for both the
//! append phase (prefill of the new question) and every decode step. Costs
//! are simulated microseconds derived from multiply-accumulate counts, bytes
//! transferred and a fixed per-call overhead; they are only meaningful
//! relative to each other.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub h2d_us_per_kib: f64,
    pub d2h_us_per_kib: f64,
    /// Simulated nanoseconds per 1024 multiply-accumulates.
    pub ns_per_kmac: f64,
    /// Fixed cost of every step call.
    pub step_overhead_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            h2d_us_per_kib: 0.05,
            d2h_us_per_kib: 0.05,
            ns_per_kmac: 1.0,
            step_overhead_us: 1.0,
        }
    }
}

impl CostModel {
    pub fn mac_us(&self, macs: u64) -> f64 {
        macs as f64 / 1024.0 * self.ns_per_kmac / 1000.0
    }

    pub fn h2d_us(&self, bytes: u64) -> f64 {
        bytes as f64 / 1024.0 * self.h2d_us_per_kib
    }

    pub fn d2h_us(&self, bytes: u64) -> f64 {
        bytes as f64 / 1024.0 * self.d2h_us_per_kib
    }

    pub fn is_valid(&self) -> bool {
        [
            self.h2d_us_per_kib,
            self.d2h_us_per_kib,
            self.ns_per_kmac,
            self.step_overhead_us,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    CalcQkvAndRope,
    UpdateCache,
    AttnForward,
    AttnOutput,
}

impl Step {
    pub const ALL: [Step; 4] = [
        Step::CalcQkvAndRope,
        Step::UpdateCache,
        Step::AttnForward,
        Step::AttnOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::CalcQkvAndRope => "calc_qkv_and_rope",
            Step::UpdateCache => "update_cache",
            Step::AttnForward => "attn_forward",
            Step::AttnOutput => "attn_output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Append,
    Decode,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Append => "append",
            Phase::Decode => "decode",
        }
    }
}

/// Work performed by one turn, as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnShape {
    pub num_layers: usize,
    /// First layer with restricted history; `None` means every layer sees
    /// the full history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watershed: Option<usize>,
    pub d_model: usize,
    /// Tokens prefilled in the append phase.
    pub query_tokens: usize,
    /// Cached history rows visible below the watershed.
    pub lower_history: usize,
    /// Cached history rows visible at and above the watershed.
    pub upper_history: usize,
    /// Tokens fed through the model during decode.
    pub decode_steps: usize,
    /// Score cells summed by the one-time selection (0 when none ran).
    pub selection_cells: u64,
    pub lower_h2d_bytes: u64,
    pub upper_h2d_bytes: u64,
    pub d2h_bytes: u64,
}

impl TurnShape {
    /// Full-history shape with no transfers.
    pub fn baseline(
        num_layers: usize,
        d_model: usize,
        query_tokens: usize,
        history: usize,
        decode_steps: usize,
    ) -> Self {
        Self {
            num_layers,
            watershed: None,
            d_model,
            query_tokens,
            lower_history: history,
            upper_history: history,
            decode_steps,
            selection_cells: 0,
            lower_h2d_bytes: 0,
            upper_h2d_bytes: 0,
            d2h_bytes: 0,
        }
    }

    fn history(&self, layer: usize) -> u64 {
        match self.watershed {
            Some(w) if layer >= w => self.upper_history as u64,
            _ => self.lower_history as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub step: Step,
    pub phase: Phase,
    pub compute_us: f64,
    pub transfer_us: f64,
}

impl LayerCost {
    pub fn total_us(&self) -> f64 {
        self.compute_us + self.transfer_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurves {
    pub entries: Vec<LayerCost>,
    pub compute_us: f64,
    pub transfer_us: f64,
    pub total_us: f64,
}

impl CostCurves {
    pub fn get(&self, layer: usize, step: Step, phase: Phase) -> Option<&LayerCost> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.step == step && e.phase == phase)
    }

    pub fn phase_total(&self, phase: Phase) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.phase == phase)
            .map(LayerCost::total_us)
            .sum()
    }

    /// `layer,step,phase,cost` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,step,phase,cost\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.layer,
                e.step.name(),
                e.phase.name(),
                e.total_us()
            );
        }
        out
    }
}

/// Evaluates the cost model over every layer, step and phase of a turn.
pub fn simulate_costs(shape: &TurnShape, model: &CostModel) -> CostCurves {
    let d = shape.d_model as u64;
    let t = shape.query_tokens as u64;
    let steps = shape.decode_steps as u64;
    let overhead = model.step_overhead_us;
    let mut entries = Vec::with_capacity(shape.num_layers * 8);

    let last_layer = shape.num_layers.saturating_sub(1);
    let writeback_phase = if steps > 0 { Phase::Decode } else { Phase::Append };

    for phase in [Phase::Append, Phase::Decode] {
        let calls = match phase {
            Phase::Append => u64::from(t > 0),
            Phase::Decode => steps,
        };
        for layer in 0..shape.num_layers {
            let hist = shape.history(layer);
            for step in Step::ALL {
                let macs = match (phase, step) {
                    (Phase::Append, Step::CalcQkvAndRope) => t * (3 * d * d + d),
                    (Phase::Append, Step::UpdateCache) => (hist + t) * 2 * d,
                    (Phase::Append, Step::AttnForward) => (t * hist + t * (t + 1) / 2) * 2 * d,
                    (Phase::Append, Step::AttnOutput) => t * d * d,
                    (Phase::Decode, Step::CalcQkvAndRope) => steps * (3 * d * d + d),
                    // cache rows seen by decode step s: hist + t + s + 1
                    (Phase::Decode, Step::UpdateCache | Step::AttnForward) => {
                        (steps * (hist + t) + steps * (steps + 1) / 2) * 2 * d
                    }
                    (Phase::Decode, Step::AttnOutput) => steps * d * d,
                };
                let mut compute = calls as f64 * overhead + model.mac_us(macs);
                let mut transfer = 0.0;
                if step == Step::UpdateCache && phase == Phase::Append {
                    if layer == 0 {
                        transfer += model.h2d_us(shape.lower_h2d_bytes);
                    }
                    if Some(layer) == shape.watershed {
                        compute += model.mac_us(shape.selection_cells);
                        transfer += model.h2d_us(shape.upper_h2d_bytes);
                    }
                }
                if step == Step::UpdateCache && phase == writeback_phase && layer == last_layer {
                    transfer += model.d2h_us(shape.d2h_bytes);
                }
                entries.push(LayerCost {
                    layer,
                    step,
                    phase,
                    compute_us: compute,
                    transfer_us: transfer,
                });
            }
        }
    }
    let compute_us = entries.iter().map(|e| e.compute_us).sum();
    let transfer_us = entries.iter().map(|e| e.transfer_us).sum();
    CostCurves {
        entries,
        compute_us,
        transfer_us,
        total_us: compute_us + transfer_us,
    }
}
