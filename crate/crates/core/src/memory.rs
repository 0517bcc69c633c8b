//! Closed-form KV-cache footprint of full attention versus round-selective
//! attention.
//!
//! With `L` layers split at the watershed `L_w`, the lower layers keep the
//! whole history while the upper layers only hold `K` of `T` rounds, so the
//! footprint ratio is `L_w / L + (K / T) (1 - L_w / L)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modeled bytes per cached element (half precision).
pub const MODELED_ELEMENT_BYTES: u64 = 2;

fn check_split(layers: usize, watershed: usize) -> Result<()> {
    if !(0 < watershed && watershed < layers) {
        return Err(Error::Domain(format!(
            "watershed {watershed} must lie strictly inside 0..{layers}"
        )));
    }
    Ok(())
}

/// Fraction of the full KV footprint kept when `kept` of `total` rounds are
/// loaded above the watershed.
pub fn memory_ratio(layers: usize, watershed: usize, kept: usize, total: usize) -> Result<f64> {
    check_split(layers, watershed)?;
    if total == 0 || kept > total {
        return Err(Error::Domain(format!(
            "need 0 <= kept ({kept}) <= total ({total}) and total >= 1"
        )));
    }
    let lower = watershed as f64 / layers as f64;
    Ok(lower + (kept as f64 / total as f64) * (1.0 - lower))
}

/// Saving `1 - watershed / layers` as a whole percent, rounding halves up.
pub fn save_percent(layers: usize, watershed: usize) -> Result<u64> {
    check_split(layers, watershed)?;
    let (l, upper) = (layers as u64, (layers - watershed) as u64);
    Ok((200 * upper + l) / (2 * l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintParams {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub watershed: usize,
    pub kept: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    /// Full-attention KV bytes, `2 * 2 * B * S * H * L`.
    pub m_orig: u64,
    /// Average round-selective KV bytes.
    pub m_round: f64,
    pub ratio: f64,
}

pub fn footprint_report(p: &FootprintParams) -> Result<Footprint> {
    if p.batch == 0 || p.seq_len == 0 || p.hidden == 0 {
        return Err(Error::Domain("batch, seq_len and hidden must be positive".into()));
    }
    memory_ratio(p.layers, p.watershed, p.kept, p.total)?;
    let per_layer = 2 * MODELED_ELEMENT_BYTES * (p.batch * p.seq_len * p.hidden) as u64;
    let m_orig = per_layer * p.layers as u64;
    let lower = (per_layer * p.watershed as u64) as f64;
    let upper = (per_layer * (p.layers - p.watershed) as u64) as f64;
    let m_round = lower + (p.kept as f64 / p.total as f64) * upper;
    Ok(Footprint {
        m_orig,
        m_round,
        ratio: m_round / m_orig as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub family: String,
    pub size: String,
    pub layers: usize,
    pub watershed: usize,
    pub save_percent: u64,
}

#[derive(Deserialize)]
struct ReferenceFile {
    schema_version: u32,
    model: Vec<ReferenceModel>,
}

const REFERENCE_MODELS: &str = include_str!("../data/reference_models.toml");

/// Version of the bundled reference table.
pub fn reference_schema_version() -> u32 {
    parse_reference().map(|f| f.schema_version).unwrap_or(0)
}

fn parse_reference() -> Result<ReferenceFile> {
    toml::from_str(REFERENCE_MODELS)
        .map_err(|e| Error::Invariant(format!("bundled reference table: {e}")))
}

/// Published watershed layers of common checkpoints.
pub fn reference_models() -> Result<Vec<ReferenceModel>> {
    Ok(parse_reference()?.model)
}
