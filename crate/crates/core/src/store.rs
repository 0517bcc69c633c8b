//! Two-tier (device/host) store for per-round KV blocks.
//!
//! Every round owns exactly two blocks: the lower block holds its keys and
//! values for layers `0..watershed`, the upper block for `watershed..L`.
//! Blocks move whole; a batch of blocks moved together is one transfer event
//! in the [`TransferLedger`]. Byte counts are modeled at two bytes per element
//! regardless of the `f32` payload actually held.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MODELED_ELEMENT_BYTES;

/// Default simulated device capacity.
pub const DEFAULT_DEVICE_CAPACITY: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConversationId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub conversation: ConversationId,
    pub round: usize,
    pub half: Half,
}

impl BlockKey {
    pub fn new(conversation: ConversationId, round: usize, half: Half) -> Self {
        Self {
            conversation,
            round,
            half,
        }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let half = match self.half {
            Half::Lower => "lower",
            Half::Upper => "upper",
        };
        write!(f, "c{}/r{}/{half}", self.conversation.0, self.round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Device,
    Host,
    Dropped,
}

/// Layer split and widths shared by every block in a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreGeometry {
    pub num_layers: usize,
    pub watershed: usize,
    pub d_model: usize,
}

impl StoreGeometry {
    pub fn new(num_layers: usize, watershed: usize, d_model: usize) -> Result<Self> {
        if !(0 < watershed && watershed < num_layers) || d_model == 0 {
            return Err(Error::Domain(format!(
                "store geometry: watershed {watershed}, layers {num_layers}, width {d_model}"
            )));
        }
        Ok(Self {
            num_layers,
            watershed,
            d_model,
        })
    }

    pub fn layers(&self, half: Half) -> Range<usize> {
        match half {
            Half::Lower => 0..self.watershed,
            Half::Upper => self.watershed..self.num_layers,
        }
    }

    /// `2 (K, V) * element bytes * tokens * hidden * layers`.
    pub fn block_bytes(&self, half: Half, tokens: usize) -> u64 {
        2 * MODELED_ELEMENT_BYTES * (tokens * self.d_model * self.layers(half).len()) as u64
    }

    /// `f32` elements in a block payload.
    pub fn payload_len(&self, half: Half, tokens: usize) -> usize {
        2 * tokens * self.d_model * self.layers(half).len()
    }
}

/// One round's keys and values for a contiguous layer range.
///
/// The payload is laid out per layer as all key rows followed by all value
/// rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub key: BlockKey,
    pub layers: Range<usize>,
    pub tokens: usize,
    pub byte_size: u64,
    pub residency: Residency,
    payload: Vec<f32>,
}

impl KvBlock {
    pub fn payload(&self) -> &[f32] {
        &self.payload
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    H2d,
    D2h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Round ingested with its upper block written straight to host.
    Ingest,
    LowerFetch,
    UpperFetch,
    Writeback,
    SessionEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub conversation: ConversationId,
    pub turn: Option<usize>,
    pub direction: Direction,
    pub kind: TransferKind,
    pub blocks: Vec<BlockKey>,
    pub bytes: u64,
}

/// Transfers attributed to one turn of one conversation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTransfers {
    pub conversation: u64,
    pub turn: usize,
    pub h2d_events: u64,
    pub h2d_bytes: u64,
    pub d2h_events: u64,
    pub d2h_bytes: u64,
    pub lower_h2d_events: u64,
    pub lower_h2d_bytes: u64,
    pub upper_h2d_events: u64,
    pub upper_h2d_bytes: u64,
    /// Device bytes in use when the turn ended.
    pub device_used_bytes: u64,
    /// Highest device usage observed during the turn.
    pub device_peak_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub h2d_events: u64,
    pub h2d_bytes: u64,
    pub d2h_events: u64,
    pub d2h_bytes: u64,
    pub events: Vec<TransferEvent>,
    pub turns: Vec<TurnTransfers>,
}

impl TransferLedger {
    fn record(&mut self, event: TransferEvent) {
        match event.direction {
            Direction::H2d => {
                self.h2d_events += 1;
                self.h2d_bytes += event.bytes;
            }
            Direction::D2h => {
                self.d2h_events += 1;
                self.d2h_bytes += event.bytes;
            }
        }
        self.events.push(event);
    }

    /// Turn records of one conversation.
    pub fn turns_of(&self, conversation: ConversationId) -> impl Iterator<Item = &TurnTransfers> {
        self.turns
            .iter()
            .filter(move |t| t.conversation == conversation.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TieredStore {
    geometry: StoreGeometry,
    device_capacity: u64,
    device_used: u64,
    host_used: u64,
    blocks: BTreeMap<BlockKey, KvBlock>,
    ledger: TransferLedger,
    open_turn: Option<(ConversationId, usize, u64)>,
}

impl TieredStore {
    pub fn new(geometry: StoreGeometry, device_capacity: u64) -> Self {
        Self {
            geometry,
            device_capacity,
            device_used: 0,
            host_used: 0,
            blocks: BTreeMap::new(),
            ledger: TransferLedger::default(),
            open_turn: None,
        }
    }

    pub fn geometry(&self) -> &StoreGeometry {
        &self.geometry
    }

    pub fn device_capacity(&self) -> u64 {
        self.device_capacity
    }

    pub fn device_used(&self) -> u64 {
        self.device_used
    }

    pub fn host_used(&self) -> u64 {
        self.host_used
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn block(&self, key: &BlockKey) -> Option<&KvBlock> {
        self.blocks.get(key)
    }

    pub fn residency(&self, key: &BlockKey) -> Option<Residency> {
        self.blocks.get(key).map(|b| b.residency)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KvBlock> {
        self.blocks.values()
    }

    /// Payload of a device-resident block.
    pub fn device_payload(&self, key: &BlockKey) -> Result<&[f32]> {
        let block = self
            .blocks
            .get(key)
            .ok_or_else(|| Error::MissingBlock(key.to_string()))?;
        match block.residency {
            Residency::Device => Ok(&block.payload),
            Residency::Host => Err(Error::NotResident(key.to_string())),
            Residency::Dropped => Err(Error::DroppedBlock(key.to_string())),
        }
    }

    /// Opens a per-turn tally; transfers until [`end_turn`](Self::end_turn)
    /// are attributed to it.
    pub fn begin_turn(&mut self, conversation: ConversationId, turn: usize) {
        self.open_turn = Some((conversation, turn, self.device_used));
        self.ledger.turns.push(TurnTransfers {
            conversation: conversation.0,
            turn,
            device_used_bytes: self.device_used,
            device_peak_bytes: self.device_used,
            ..TurnTransfers::default()
        });
    }

    pub fn end_turn(&mut self) -> Option<TurnTransfers> {
        let (_, _, peak) = self.open_turn.take()?;
        let used = self.device_used;
        let rec = self.ledger.turns.last_mut()?;
        rec.device_used_bytes = used;
        rec.device_peak_bytes = peak.max(used);
        Some(rec.clone())
    }

    fn note_device_usage(&mut self) {
        if let Some((_, _, peak)) = self.open_turn.as_mut() {
            *peak = (*peak).max(self.device_used);
        }
    }

    fn emit(
        &mut self,
        conversation: ConversationId,
        direction: Direction,
        kind: TransferKind,
        blocks: Vec<BlockKey>,
        bytes: u64,
    ) {
        let turn = self
            .open_turn
            .filter(|(c, _, _)| *c == conversation)
            .map(|(_, t, _)| t);
        if let (Some(_), Some(rec)) = (turn, self.ledger.turns.last_mut()) {
            match direction {
                Direction::H2d => {
                    rec.h2d_events += 1;
                    rec.h2d_bytes += bytes;
                    match kind {
                        TransferKind::LowerFetch => {
                            rec.lower_h2d_events += 1;
                            rec.lower_h2d_bytes += bytes;
                        }
                        TransferKind::UpperFetch => {
                            rec.upper_h2d_events += 1;
                            rec.upper_h2d_bytes += bytes;
                        }
                        _ => {}
                    }
                }
                Direction::D2h => {
                    rec.d2h_events += 1;
                    rec.d2h_bytes += bytes;
                }
            }
        }
        self.ledger.record(TransferEvent {
            conversation,
            turn,
            direction,
            kind,
            blocks,
            bytes,
        });
    }

    fn reserve_device(&self, bytes: u64) -> Result<()> {
        let available = self.device_capacity.saturating_sub(self.device_used);
        if bytes > available {
            return Err(Error::Capacity {
                required: bytes,
                available,
            });
        }
        Ok(())
    }

    fn make_block(
        &self,
        key: BlockKey,
        tokens: usize,
        payload: Vec<f32>,
        residency: Residency,
    ) -> Result<KvBlock> {
        let expected = self.geometry.payload_len(key.half, tokens);
        if payload.len() != expected {
            return Err(Error::PayloadSize {
                block: key.to_string(),
                expected,
                actual: payload.len(),
            });
        }
        Ok(KvBlock {
            key,
            layers: self.geometry.layers(key.half),
            tokens,
            byte_size: self.geometry.block_bytes(key.half, tokens),
            residency,
            payload,
        })
    }

    fn insert_round(
        &mut self,
        conversation: ConversationId,
        round: usize,
        tokens: usize,
        lower: Vec<f32>,
        upper: Vec<f32>,
        upper_residency: Residency,
    ) -> Result<(BlockKey, BlockKey)> {
        let lk = BlockKey::new(conversation, round, Half::Lower);
        let uk = BlockKey::new(conversation, round, Half::Upper);
        if self.blocks.contains_key(&lk) || self.blocks.contains_key(&uk) {
            return Err(Error::DuplicateBlock(format!("c{}/r{round}", conversation.0)));
        }
        let lower = self.make_block(lk, tokens, lower, Residency::Device)?;
        let upper = self.make_block(uk, tokens, upper, upper_residency)?;
        let device_bytes = lower.byte_size
            + if upper_residency == Residency::Device {
                upper.byte_size
            } else {
                0
            };
        self.reserve_device(device_bytes)?;
        self.device_used += device_bytes;
        if upper_residency == Residency::Host {
            self.host_used += upper.byte_size;
        }
        self.note_device_usage();
        self.blocks.insert(lk, lower);
        self.blocks.insert(uk, upper);
        Ok((lk, uk))
    }

    /// Stores a finished round: the lower block stays on device, the upper
    /// block is written to host as one transfer.
    pub fn put_round(
        &mut self,
        conversation: ConversationId,
        round: usize,
        tokens: usize,
        lower: Vec<f32>,
        upper: Vec<f32>,
    ) -> Result<(BlockKey, BlockKey)> {
        let keys = self.insert_round(conversation, round, tokens, lower, upper, Residency::Host)?;
        let bytes = self.geometry.block_bytes(Half::Upper, tokens);
        self.emit(
            conversation,
            Direction::D2h,
            TransferKind::Ingest,
            vec![keys.1],
            bytes,
        );
        Ok(keys)
    }

    /// Stores a round computed on device with both blocks left resident;
    /// the upper block is expected to leave with the turn's batched writeback.
    pub fn put_round_resident(
        &mut self,
        conversation: ConversationId,
        round: usize,
        tokens: usize,
        lower: Vec<f32>,
        upper: Vec<f32>,
    ) -> Result<(BlockKey, BlockKey)> {
        self.insert_round(conversation, round, tokens, lower, upper, Residency::Device)
    }

    fn move_batch(
        &mut self,
        conversation: ConversationId,
        keys: &[BlockKey],
        to: Residency,
        kind: TransferKind,
    ) -> Result<u64> {
        let from = match to {
            Residency::Device => Residency::Host,
            _ => Residency::Device,
        };
        let mut moving = Vec::new();
        let mut bytes = 0u64;
        for key in keys {
            let block = self
                .blocks
                .get(key)
                .ok_or_else(|| Error::MissingBlock(key.to_string()))?;
            if block.residency == Residency::Dropped {
                return Err(Error::DroppedBlock(key.to_string()));
            }
            if block.residency == from && !moving.contains(key) {
                moving.push(*key);
                bytes += block.byte_size;
            }
        }
        if moving.is_empty() {
            return Ok(0);
        }
        if to == Residency::Device {
            self.reserve_device(bytes)?;
            self.device_used += bytes;
            self.host_used -= bytes;
        } else {
            self.device_used -= bytes;
            self.host_used += bytes;
        }
        for key in &moving {
            if let Some(b) = self.blocks.get_mut(key) {
                b.residency = to;
            }
        }
        self.note_device_usage();
        let direction = if to == Residency::Device {
            Direction::H2d
        } else {
            Direction::D2h
        };
        self.emit(conversation, direction, kind, moving, bytes);
        Ok(bytes)
    }

    fn keys(conversation: ConversationId, rounds: &[usize], half: Half) -> Vec<BlockKey> {
        rounds
            .iter()
            .map(|&r| BlockKey::new(conversation, r, half))
            .collect()
    }

    /// Brings every host-resident lower block of `rounds` to device in one
    /// batched transfer. Returns the bytes moved.
    pub fn fetch_lower_all(&mut self, conversation: ConversationId, rounds: &[usize]) -> Result<u64> {
        let keys = Self::keys(conversation, rounds, Half::Lower);
        self.move_batch(conversation, &keys, Residency::Device, TransferKind::LowerFetch)
    }

    /// Brings the upper blocks of the selected rounds to device in one
    /// batched transfer. Selecting a dropped round is an error.
    pub fn fetch_upper(&mut self, conversation: ConversationId, rounds: &[usize]) -> Result<u64> {
        let keys = Self::keys(conversation, rounds, Half::Upper);
        self.move_batch(conversation, &keys, Residency::Device, TransferKind::UpperFetch)
    }

    /// Moves device-resident upper blocks back to host in one transfer.
    pub fn writeback_upper(&mut self, conversation: ConversationId, rounds: &[usize]) -> Result<u64> {
        let keys = Self::keys(conversation, rounds, Half::Upper);
        self.move_batch(conversation, &keys, Residency::Host, TransferKind::Writeback)
    }

    /// Purges upper blocks; their payload is released and later fetches fail.
    pub fn drop_upper(&mut self, conversation: ConversationId, rounds: &[usize]) -> Result<()> {
        for key in Self::keys(conversation, rounds, Half::Upper) {
            let block = self
                .blocks
                .get_mut(&key)
                .ok_or_else(|| Error::MissingBlock(key.to_string()))?;
            match block.residency {
                Residency::Device => self.device_used -= block.byte_size,
                Residency::Host => self.host_used -= block.byte_size,
                Residency::Dropped => continue,
            }
            block.residency = Residency::Dropped;
            block.payload = Vec::new();
        }
        Ok(())
    }

    /// Writes every device-resident block of a conversation to host in one
    /// transfer, ending its session.
    pub fn end_session(&mut self, conversation: ConversationId) -> Result<u64> {
        let keys: Vec<BlockKey> = self
            .blocks
            .values()
            .filter(|b| b.key.conversation == conversation && b.residency == Residency::Device)
            .map(|b| b.key)
            .collect();
        self.move_batch(conversation, &keys, Residency::Host, TransferKind::SessionEnd)
    }

    /// Checks that the byte counters match the blocks they describe.
    pub fn check_accounting(&self) -> Result<()> {
        let mut device = 0;
        let mut host = 0;
        for b in self.blocks.values() {
            match b.residency {
                Residency::Device => device += b.byte_size,
                Residency::Host => host += b.byte_size,
                Residency::Dropped => {
                    if !b.payload.is_empty() {
                        return Err(Error::Invariant(format!("dropped block {} holds data", b.key)));
                    }
                }
            }
        }
        if device != self.device_used || host != self.host_used {
            return Err(Error::Invariant(format!(
                "accounting: device {device} vs {}, host {host} vs {}",
                self.device_used, self.host_used
            )));
        }
        if self.device_used > self.device_capacity {
            return Err(Error::Invariant("device over capacity".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: ConversationId = ConversationId(1);

    fn store() -> TieredStore {
        TieredStore::new(StoreGeometry::new(8, 3, 64).unwrap(), DEFAULT_DEVICE_CAPACITY)
    }

    fn put(s: &mut TieredStore, round: usize, tokens: usize) {
        let g = *s.geometry();
        s.put_round(
            C,
            round,
            tokens,
            vec![0.5; g.payload_len(Half::Lower, tokens)],
            vec![0.25; g.payload_len(Half::Upper, tokens)],
        )
        .unwrap();
    }

    #[test]
    fn block_sizes() {
        let g = StoreGeometry::new(8, 3, 64).unwrap();
        assert_eq!(g.block_bytes(Half::Lower, 10), 7_680);
        assert_eq!(g.block_bytes(Half::Upper, 10), 12_800);
    }

    #[test]
    fn put_round_writes_upper_once() {
        let mut s = store();
        put(&mut s, 0, 10);
        assert_eq!(s.ledger().d2h_events, 1);
        assert_eq!(s.ledger().d2h_bytes, 12_800);
        assert_eq!(s.device_used(), 7_680);
        assert_eq!(s.residency(&BlockKey::new(C, 0, Half::Upper)), Some(Residency::Host));
        let g = *s.geometry();
        let again = s.put_round(
            C,
            0,
            10,
            vec![0.0; g.payload_len(Half::Lower, 10)],
            vec![0.0; g.payload_len(Half::Upper, 10)],
        );
        assert!(matches!(again, Err(Error::DuplicateBlock(_))));
        s.check_accounting().unwrap();
    }

    #[test]
    fn payload_size_checked() {
        let mut s = store();
        assert!(matches!(
            s.put_round(C, 0, 10, vec![0.0; 3], vec![0.0; 3]),
            Err(Error::PayloadSize { .. })
        ));
    }

    #[test]
    fn capacity_error_names_bytes() {
        let mut s = TieredStore::new(StoreGeometry::new(8, 3, 64).unwrap(), 1_000);
        let g = *s.geometry();
        let r = s.put_round(
            C,
            0,
            10,
            vec![0.0; g.payload_len(Half::Lower, 10)],
            vec![0.0; g.payload_len(Half::Upper, 10)],
        );
        match r {
            Err(Error::Capacity {
                required,
                available,
            }) => assert_eq!((required, available), (7_680, 1_000)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lower_fetch_batches() {
        let mut s = store();
        for r in 0..5 {
            put(&mut s, r, 4 + r);
        }
        assert_eq!(s.fetch_lower_all(C, &[0, 1, 2, 3, 4]).unwrap(), 0);
        assert_eq!(s.ledger().h2d_events, 0);
        s.end_session(C).unwrap();
        let d2h = s.ledger().d2h_events;
        let bytes = s.fetch_lower_all(C, &[0, 1, 2, 3, 4]).unwrap();
        let expected: u64 = (0..5)
            .map(|r| s.geometry().block_bytes(Half::Lower, 4 + r))
            .sum();
        assert_eq!(bytes, expected);
        assert_eq!(s.ledger().h2d_events, 1);
        assert_eq!(s.ledger().d2h_events, d2h);
        assert_eq!(s.fetch_lower_all(C, &[]).unwrap(), 0);
        s.check_accounting().unwrap();
    }

    #[test]
    fn upper_fetch_and_writeback() {
        let mut s = store();
        for r in 0..6 {
            put(&mut s, r, 8);
        }
        assert_eq!(s.fetch_upper(C, &[]).unwrap(), 0);
        let before = s.device_used();
        let bytes = s.fetch_upper(C, &[1, 3, 4]).unwrap();
        assert_eq!(bytes, 3 * s.geometry().block_bytes(Half::Upper, 8));
        assert_eq!(s.ledger().h2d_events, 1);
        assert_eq!(s.device_used(), before + bytes);

        let d2h = s.ledger().d2h_events;
        s.writeback_upper(C, &[1, 3, 4]).unwrap();
        assert_eq!(s.ledger().d2h_events, d2h + 1);
        assert_eq!(s.device_used(), before);
        s.writeback_upper(C, &[]).unwrap();
        assert_eq!(s.ledger().d2h_events, d2h + 1);
        s.check_accounting().unwrap();
    }

    #[test]
    fn dropped_blocks_cannot_be_fetched() {
        let mut s = store();
        put(&mut s, 0, 8);
        put(&mut s, 1, 8);
        s.drop_upper(C, &[0]).unwrap();
        assert!(matches!(s.fetch_upper(C, &[0, 1]), Err(Error::DroppedBlock(_))));
        assert_eq!(
            s.residency(&BlockKey::new(C, 0, Half::Upper)),
            Some(Residency::Dropped)
        );
        assert!(s.block(&BlockKey::new(C, 0, Half::Upper)).unwrap().payload().is_empty());
        s.check_accounting().unwrap();
    }

    #[test]
    fn host_payload_is_not_readable() {
        let mut s = store();
        put(&mut s, 0, 2);
        assert!(s.device_payload(&BlockKey::new(C, 0, Half::Lower)).is_ok());
        assert!(matches!(
            s.device_payload(&BlockKey::new(C, 0, Half::Upper)),
            Err(Error::NotResident(_))
        ));
    }

    #[test]
    fn per_turn_tally() {
        let mut s = store();
        for r in 0..3 {
            put(&mut s, r, 8);
        }
        s.begin_turn(C, 3);
        s.fetch_upper(C, &[0, 2]).unwrap();
        s.writeback_upper(C, &[0, 2]).unwrap();
        let t = s.end_turn().unwrap();
        assert_eq!(t.upper_h2d_events, 1);
        assert_eq!(t.d2h_events, 1);
        assert_eq!(t.device_peak_bytes, s.device_used() + t.upper_h2d_bytes);
    }
}
