//! A small deterministic multi-layer attention model.
//!
//! Each layer is `h <- h + Wo * attn(rope(Wq x), rope(Wk x), Wv x)` with
//! `x = rmsnorm(h)`; there is no MLP block and the output projection is tied
//! to the embedding. The model exists to produce real KV caches and captured
//! attention scores for the round statistics and the tiered pipeline, so
//! everything is `f32`, single sequence, greedy.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conversation::VOCAB_SIZE;
use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-6;

/// How per-head scores are collapsed into one captured matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    /// Sum the per-head softmax rows, then renormalize each row.
    #[default]
    MeanOfSoftmax,
    /// Softmax of the head-averaged logits.
    SoftmaxOfMeanLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default)]
    pub head_reduction: HeadReduction,
}

fn default_rope_base() -> f32 {
    10_000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            d_model: 64,
            vocab_size: VOCAB_SIZE,
            seed: 42,
            rope_base: default_rope_base(),
            head_reduction: HeadReduction::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidDims(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidDims(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidDims(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::InvalidDims("rope_base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Projection matrices of one layer, `d_model x d_model` row-major,
/// applied as `y = x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
    inv_freq: Vec<f32>,
}

/// Per-layer keys and values with the absolute position of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    d_model: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: Vec<usize>,
}

impl LayerKv {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn from_parts(
        d_model: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
        positions: Vec<usize>,
    ) -> Result<Self> {
        if keys.len() != values.len() || keys.len() != positions.len() * d_model {
            return Err(Error::Shape(format!(
                "kv parts: {} keys, {} values, {} positions at width {d_model}",
                keys.len(),
                values.len(),
                positions.len()
            )));
        }
        Ok(Self {
            d_model,
            keys,
            values,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn append(&mut self, keys: &[f32], values: &[f32], positions: &[usize]) {
        debug_assert_eq!(keys.len(), positions.len() * self.d_model);
        debug_assert_eq!(values.len(), keys.len());
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.positions.extend_from_slice(positions);
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &LayerKv) {
        self.append(&other.keys, &other.values, &other.positions);
    }

    pub fn truncate(&mut self, rows: usize) {
        self.keys.truncate(rows * self.d_model);
        self.values.truncate(rows * self.d_model);
        self.positions.truncate(rows);
    }

    /// Rows whose position satisfies `keep`, in stored order.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> LayerKv {
        let d = self.d_model;
        let mut out = LayerKv::new(d);
        for (row, &pos) in self.positions.iter().enumerate() {
            if keep(pos) {
                out.keys.extend_from_slice(&self.keys[row * d..(row + 1) * d]);
                out.values.extend_from_slice(&self.values[row * d..(row + 1) * d]);
                out.positions.push(pos);
            }
        }
        out
    }
}

/// One optional [`LayerKv`] per model layer. Absent layers make forwarding
/// through them an error, which is how partial (lower-only) caches are built.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    layers: Vec<Option<LayerKv>>,
}

impl KvCache {
    /// Empty caches for every layer.
    pub fn new(num_layers: usize, d_model: usize) -> Self {
        Self::with_layers(num_layers, d_model, 0..num_layers)
    }

    /// Empty caches only for the layers in `present`.
    pub fn with_layers(num_layers: usize, d_model: usize, present: Range<usize>) -> Self {
        let layers = (0..num_layers)
            .map(|l| present.contains(&l).then(|| LayerKv::new(d_model)))
            .collect();
        Self { d_model, layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerKv> {
        self.layers
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingCacheLayer(layer))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerKv> {
        self.layers
            .get_mut(layer)
            .and_then(Option::as_mut)
            .ok_or(Error::MissingCacheLayer(layer))
    }

    pub fn set_layer(&mut self, layer: usize, kv: LayerKv) -> Result<()> {
        if kv.d_model != self.d_model {
            return Err(Error::Shape(format!(
                "layer width {} vs cache width {}",
                kv.d_model, self.d_model
            )));
        }
        let slot = self
            .layers
            .get_mut(layer)
            .ok_or(Error::MissingCacheLayer(layer))?;
        *slot = Some(kv);
        Ok(())
    }

    pub fn lens(&self) -> Vec<Option<usize>> {
        self.layers
            .iter()
            .map(|l| l.as_ref().map(LayerKv::len))
            .collect()
    }

    /// Drops every row at or beyond `position` in all present layers.
    pub fn truncate_from(&mut self, position: usize) {
        for kv in self.layers.iter_mut().flatten() {
            let keep = kv.positions.iter().take_while(|&&p| p < position).count();
            kv.truncate(keep);
        }
    }
}

/// Head-reduced attention scores captured from one layer.
///
/// `scores` is `query_positions.len() x key_positions.len()` row-major;
/// masked and causally hidden cells are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer: usize,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
    pub scores: Vec<f32>,
}

impl LayerAttention {
    /// A full `seq_len x seq_len` matrix over positions `0..seq_len`.
    pub fn full(layer: usize, seq_len: usize, scores: Vec<f32>) -> Self {
        debug_assert_eq!(scores.len(), seq_len * seq_len);
        Self {
            layer,
            query_positions: (0..seq_len).collect(),
            key_positions: (0..seq_len).collect(),
            scores,
        }
    }

    pub fn rows(&self) -> usize {
        self.query_positions.len()
    }

    pub fn cols(&self) -> usize {
        self.key_positions.len()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let c = self.cols();
        &self.scores[row * c..(row + 1) * c]
    }

    /// Row index holding the query at absolute `position`.
    pub fn row_of(&self, position: usize) -> Option<usize> {
        self.query_positions.iter().position(|&p| p == position)
    }
}

/// Hidden states of a chunk of consecutive tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub d_model: usize,
    pub hidden: Vec<f32>,
    pub positions: Vec<usize>,
}

impl Activations {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.hidden[row * self.d_model..(row + 1) * self.d_model]
    }

    pub fn last_row(&self) -> Option<&[f32]> {
        self.len().checked_sub(1).map(|r| self.row(r))
    }
}

/// Key visibility for layers at or above `upper_from`. Positions not covered
/// by `visible` (the in-flight round and beyond) are always visible; lower
/// layers see everything. Causality is applied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub upper_from: usize,
    pub visible: Vec<bool>,
}

impl AttentionMask {
    pub fn is_visible(&self, layer: usize, position: usize) -> bool {
        layer < self.upper_from || self.visible.get(position).copied().unwrap_or(true)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub enum Capture {
    #[default]
    None,
    All,
    Layers(Vec<usize>),
}

impl Capture {
    fn wants(&self, layer: usize) -> bool {
        match self {
            Capture::None => false,
            Capture::All => true,
            Capture::Layers(ls) => ls.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub capture: Capture,
    pub mask: Option<&'a AttentionMask>,
}

impl<'a> ForwardOptions<'a> {
    pub fn capture(capture: Capture) -> Self {
        Self {
            capture,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: &'a AttentionMask) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub token: u32,
    pub logits: Vec<f32>,
}

fn matmul_rows(x: &[f32], w: &[f32], d: usize) -> Vec<f32> {
    let rows = x.len() / d;
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let yr = &mut out[r * d..(r + 1) * d];
        for (i, &xi) in xr.iter().enumerate() {
            let wrow = &w[i * d..(i + 1) * d];
            for (y, &wij) in yr.iter_mut().zip(wrow) {
                *y += xi * wij;
            }
        }
    }
    out
}

fn rms_norm_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let scale = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Scaled dot-product attention over a cache of keys.
///
/// `queries` holds `q_pos.len()` rows, `keys`/`values` hold `k_pos.len()`
/// rows, all of width `d_model`. Query `i` attends to key `j` iff
/// `k_pos[j] <= q_pos[i]` and `visible(j)`. Returns the concatenated per-head
/// outputs and the head-reduced score matrix (`queries x keys`).
pub fn attention_layer(
    queries: &[f32],
    q_pos: &[usize],
    keys: &[f32],
    values: &[f32],
    k_pos: &[usize],
    num_heads: usize,
    reduction: HeadReduction,
    visible: &dyn Fn(usize) -> bool,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let nq = q_pos.len();
    let nk = k_pos.len();
    if nq == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    if !queries.len().is_multiple_of(nq) {
        return Err(Error::Shape(format!(
            "{} query values for {nq} positions",
            queries.len()
        )));
    }
    let d = queries.len() / nq;
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Shape(format!("width {d} not divisible by {num_heads} heads")));
    }
    if keys.len() != nk * d || values.len() != nk * d {
        return Err(Error::Shape(format!(
            "keys {} / values {} for {nk} positions at width {d}",
            keys.len(),
            values.len()
        )));
    }
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f32).sqrt();

    let mut out = vec![0.0f32; nq * d];
    let mut scores = vec![0.0f32; nq * nk];
    let mut vis: Vec<usize> = Vec::with_capacity(nk);
    let mut logits: Vec<f32> = Vec::new();
    let mut probs: Vec<f32> = Vec::new();
    for i in 0..nq {
        vis.clear();
        vis.extend((0..nk).filter(|&j| k_pos[j] <= q_pos[i] && visible(j)));
        if vis.is_empty() {
            continue;
        }
        let q = &queries[i * d..(i + 1) * d];
        let row_scores = &mut scores[i * nk..(i + 1) * nk];
        logits.clear();
        logits.resize(num_heads * vis.len(), 0.0);
        for h in 0..num_heads {
            let qh = &q[h * dk..(h + 1) * dk];
            for (t, &j) in vis.iter().enumerate() {
                let kh = &keys[j * d + h * dk..j * d + (h + 1) * dk];
                let dot: f32 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                logits[h * vis.len() + t] = dot * scale;
            }
        }
        for h in 0..num_heads {
            let lh = &logits[h * vis.len()..(h + 1) * vis.len()];
            softmax_into(lh, &mut probs);
            let oh = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
            for (t, &j) in vis.iter().enumerate() {
                let p = probs[t];
                let vh = &values[j * d + h * dk..j * d + (h + 1) * dk];
                for (o, &v) in oh.iter_mut().zip(vh) {
                    *o += p * v;
                }
                if reduction == HeadReduction::MeanOfSoftmax {
                    row_scores[j] += p;
                }
            }
        }
        match reduction {
            HeadReduction::MeanOfSoftmax => {
                let total: f32 = vis.iter().map(|&j| row_scores[j]).sum();
                if total > 0.0 {
                    for &j in &vis {
                        row_scores[j] /= total;
                    }
                }
            }
            HeadReduction::SoftmaxOfMeanLogits => {
                let mean: Vec<f32> = (0..vis.len())
                    .map(|t| {
                        (0..num_heads).map(|h| logits[h * vis.len() + t]).sum::<f32>()
                            / num_heads as f32
                    })
                    .collect();
                softmax_into(&mean, &mut probs);
                for (t, &j) in vis.iter().enumerate() {
                    row_scores[j] = probs[t];
                }
            }
        }
    }
    Ok((out, scores))
}

fn softmax_into(logits: &[f32], out: &mut Vec<f32>) {
    out.clear();
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    out.extend(logits.iter().map(|&l| (l - max).exp()));
    let sum: f32 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
}

impl Model {
    /// Draws all weights from a ChaCha stream seeded with `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut draw = |n: usize, std: f32| -> Vec<f32> {
            (0..n).map(|_| unit.sample(&mut rng) * std).collect()
        };
        let embedding = draw(config.vocab_size * d, 1.0);
        let proj = 1.0 / (d as f32).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: draw(d * d, 2.0 * proj),
                wk: draw(d * d, 2.0 * proj),
                wv: draw(d * d, proj),
                wo: draw(d * d, proj),
            })
            .collect();
        let dk = config.head_dim();
        let inv_freq = (0..dk / 2)
            .map(|i| (f64::from(config.rope_base).powf(-2.0 * i as f64 / dk as f64)) as f32)
            .collect();
        Ok(Self {
            config,
            embedding,
            layers,
            inv_freq,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn embedding(&self) -> &[f32] {
        &self.embedding
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    /// An empty cache covering every layer of this model.
    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.num_layers(), self.d_model())
    }

    pub fn embed(&self, tokens: &[u32], start_position: usize) -> Result<Activations> {
        let d = self.d_model();
        let mut hidden = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let id = t as usize;
            if id >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
            hidden.extend_from_slice(&self.embedding[id * d..(id + 1) * d]);
        }
        Ok(Activations {
            d_model: d,
            hidden,
            positions: (start_position..start_position + tokens.len()).collect(),
        })
    }

    fn rope_rows(&self, x: &mut [f32], positions: &[usize]) {
        let d = self.d_model();
        let dk = self.config.head_dim();
        for (row, &pos) in x.chunks_exact_mut(d).zip(positions) {
            for head in row.chunks_exact_mut(dk) {
                for (i, &f) in self.inv_freq.iter().enumerate() {
                    let (sin, cos) = (pos as f32 * f).sin_cos();
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * cos - b * sin;
                    head[2 * i + 1] = a * sin + b * cos;
                }
            }
        }
    }

    /// Runs layers `layers` over `acts`, appending each layer's new keys and
    /// values to `cache` and returning the requested score captures.
    pub fn forward_range(
        &self,
        acts: &mut Activations,
        cache: &mut KvCache,
        layers: Range<usize>,
        opts: &ForwardOptions<'_>,
    ) -> Result<Vec<LayerAttention>> {
        let total = self.num_layers();
        if layers.start > layers.end || layers.end > total {
            return Err(Error::LayerRange {
                start: layers.start,
                end: layers.end,
                layers: total,
            });
        }
        if acts.d_model != self.d_model() {
            return Err(Error::Shape(format!(
                "activation width {} vs model width {}",
                acts.d_model,
                self.d_model()
            )));
        }
        for l in layers.clone() {
            cache.layer(l)?;
        }
        let mut captures = Vec::new();
        if acts.is_empty() {
            return Ok(captures);
        }
        let d = self.d_model();
        for l in layers {
            let w = &self.layers[l];
            let x = rms_norm_rows(&acts.hidden, d);
            let mut q = matmul_rows(&x, &w.wq, d);
            let mut k = matmul_rows(&x, &w.wk, d);
            let v = matmul_rows(&x, &w.wv, d);
            self.rope_rows(&mut q, &acts.positions);
            self.rope_rows(&mut k, &acts.positions);

            let kv = cache.layer_mut(l)?;
            kv.append(&k, &v, &acts.positions);
            let kv = cache.layer(l)?;
            let k_pos = kv.positions();
            let mask = opts.mask;
            let visible = |j: usize| mask.is_none_or(|m| m.is_visible(l, k_pos[j]));
            let (attn, scores) = attention_layer(
                &q,
                &acts.positions,
                kv.keys(),
                kv.values(),
                k_pos,
                self.config.num_heads,
                self.config.head_reduction,
                &visible,
            )?;
            let proj = matmul_rows(&attn, &w.wo, d);
            for (h, p) in acts.hidden.iter_mut().zip(&proj) {
                *h += p;
            }
            if opts.capture.wants(l) {
                captures.push(LayerAttention {
                    layer: l,
                    query_positions: acts.positions.clone(),
                    key_positions: k_pos.to_vec(),
                    scores,
                });
            }
        }
        Ok(captures)
    }

    /// Embeds `tokens` at `start_position` and runs every layer.
    pub fn prefill(
        &self,
        tokens: &[u32],
        start_position: usize,
        cache: &mut KvCache,
        opts: &ForwardOptions<'_>,
    ) -> Result<(Activations, Vec<LayerAttention>)> {
        let mut acts = self.embed(tokens, start_position)?;
        let caps = self.forward_range(&mut acts, cache, 0..self.num_layers(), opts)?;
        Ok((acts, caps))
    }

    /// Output logits for one final hidden row.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let d = self.d_model();
        let x = rms_norm_rows(hidden, d);
        self.embedding
            .chunks_exact(d)
            .map(|e| e.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Feeds one token at `position` through every layer and returns the
    /// greedy next token.
    pub fn decode_step(
        &self,
        cache: &mut KvCache,
        token: u32,
        position: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<DecodeOutput> {
        for l in 0..self.num_layers() {
            if cache.layer(l)?.is_empty() {
                return Err(Error::EmptyCache);
            }
        }
        let mut acts = self.embed(&[token], position)?;
        let opts = ForwardOptions {
            capture: Capture::None,
            mask,
        };
        self.forward_range(&mut acts, cache, 0..self.num_layers(), &opts)?;
        let logits = self.logits(acts.row(0));
        let next = argmax(&logits).ok_or(Error::EmptyCache)? as u32;
        Ok(DecodeOutput {
            token: next,
            logits,
        })
    }
}
