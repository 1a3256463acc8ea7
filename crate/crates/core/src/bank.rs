//! The pyramid memory bank.
//!
//! Each stream frame is routed to exactly one layer: the finest layer whose
//! sampling grid contains the frame's tick. When a layer exceeds its
//! capacity, the most similar adjacent pair (global-pooled cosine) is found
//! and its older frame is evicted, pooled to the next layer's resolution
//! and written there. The deepest layer discards its evictions. Every
//! eviction emits a [`SyncEvent`] whose boundary is the evicted timestamp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{validate_config, BankConfig, LayerConfig, ValidationReport};
use crate::kernels::{avg_pool2d, most_similar_adjacent_pair};
use crate::kvcache::CacheEntry;
use crate::types::{FeatureGrid, Frame, FrameOrigin, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("{0}")]
    InvalidConfig(ValidationReport),
    #[error("timestamp {got} is not after the last ingested timestamp {last}")]
    NonMonotonicTimestamp { last: Timestamp, got: Timestamp },
    #[error("expected a {expected:?} grid, got {got:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("timestamp is on a {got} fps grid, bank runs at {expected} fps")]
    BaseFpsMismatch { expected: u32, got: u32 },
}

/// Erasure boundary emitted by one eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyncEvent {
    /// Timestamp of the evicted (older) frame of the chosen pair.
    pub t_min: Timestamp,
    pub evicted_from_layer: usize,
    /// 1-based position of this eviction within the chain triggered by one ingest.
    pub cascade_depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer {
    config: LayerConfig,
    frames: Vec<Frame>,
}

impl MemoryLayer {
    fn new(config: LayerConfig) -> Self {
        Self { frames: Vec::with_capacity(config.capacity + 1), config }
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn token_count(&self) -> u64 {
        self.frames.iter().map(Frame::token_count).sum()
    }

    fn over_capacity(&self) -> bool {
        self.frames.len() > self.config.capacity
    }

    fn insert_ordered(&mut self, frame: Frame) {
        let pos = self.frames.partition_point(|f| f.ts < frame.ts);
        self.frames.insert(pos, frame);
    }
}

/// Layer index (1-based) a stream frame at `ts` is written to, or `None` when
/// the tick lies on no layer's sampling grid.
///
/// A tick is on layer `i`'s grid iff `tick * min(r_i, base_fps)` is a multiple
/// of `base_fps`. The finest matching layer wins.
pub fn route_frame(cfg: &BankConfig, ts: Timestamp) -> Option<usize> {
    if ts.base_fps != cfg.base_fps || cfg.base_fps == 0 {
        return None;
    }
    let base = cfg.base_fps as u128;
    (1..=cfg.n_layers()).find(|&i| (ts.tick as u128 * cfg.effective_rate(i) as u128).is_multiple_of(base))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidMemoryBank {
    config: BankConfig,
    layers: Vec<MemoryLayer>,
    budget: u64,
    ingest_count: u64,
    dropped_count: u64,
    last_ts: Option<Timestamp>,
    sync_log: Vec<SyncEvent>,
}

impl PyramidMemoryBank {
    pub fn new(config: BankConfig) -> Result<Self, BankError> {
        let report = validate_config(&config);
        if !report.ok {
            return Err(BankError::InvalidConfig(report));
        }
        let layers = config.layers.iter().cloned().map(MemoryLayer::new).collect();
        Ok(Self {
            config,
            layers,
            budget: report.total_budget,
            ingest_count: 0,
            dropped_count: 0,
            last_ts: None,
            sync_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    /// `Σ C_i · tokens_i`.
    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn layers(&self) -> &[MemoryLayer] {
        &self.layers
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> &MemoryLayer {
        &self.layers[index - 1]
    }

    /// Frames offered to [`ingest`](Self::ingest), including dropped ones.
    pub fn ingest_count(&self) -> u64 {
        self.ingest_count
    }

    /// Frames that matched no layer's sampling grid.
    pub fn dropped_count(&self) -> u64 {
        self.dropped_count
    }

    pub fn sync_log(&self) -> &[SyncEvent] {
        &self.sync_log
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let first = self.config.layer(1);
        (first.res_h, first.res_w, self.config.depth)
    }

    /// Writes one stream frame, given at layer-1 resolution.
    ///
    /// Returns the evictions it caused, in the order they happened.
    pub fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, BankError> {
        if ts.base_fps != self.config.base_fps {
            return Err(BankError::BaseFpsMismatch { expected: self.config.base_fps, got: ts.base_fps });
        }
        if let Some(last) = self.last_ts {
            if ts <= last {
                return Err(BankError::NonMonotonicTimestamp { last, got: ts });
            }
        }
        let expected = self.input_shape();
        let got = (grid.height(), grid.width(), grid.depth());
        if got != expected {
            return Err(BankError::ShapeMismatch { expected, got });
        }

        self.last_ts = Some(ts);
        self.ingest_count += 1;
        let Some(dest) = route_frame(&self.config, ts) else {
            self.dropped_count += 1;
            return Ok(Vec::new());
        };

        let target = self.config.layer(dest);
        let grid = avg_pool2d(&grid, target.res_h, target.res_w).expect("validated configs pool evenly");
        // ts is newer than anything stored, so appending keeps the layer ordered
        self.layers[dest - 1].frames.push(Frame::sampled(ts, grid, dest));

        let mut events = Vec::new();
        while let Some(i) = self.layers.iter().position(MemoryLayer::over_capacity) {
            let (_, event) = self.evict_and_downwrite(i + 1, events.len() + 1);
            events.push(event);
        }
        self.sync_log.extend_from_slice(&events);
        Ok(events)
    }

    /// Evicts the older frame of layer `index`'s most similar adjacent pair
    /// and writes it, pooled, into the next layer.
    fn evict_and_downwrite(&mut self, index: usize, cascade_depth: usize) -> (Frame, SyncEvent) {
        let layer = &mut self.layers[index - 1];
        debug_assert!(layer.len() >= 2 && layer.over_capacity());
        let k = most_similar_adjacent_pair(layer.frames.iter().map(|f| &f.grid))
            .expect("an over-capacity layer holds at least two frames");
        let evicted = layer.frames.remove(k);
        let event = SyncEvent { t_min: evicted.ts, evicted_from_layer: index, cascade_depth };

        if index < self.layers.len() {
            let next = &mut self.layers[index];
            let (h, w) = (next.config.res_h, next.config.res_w);
            let grid = avg_pool2d(&evicted.grid, h, w).expect("validated configs pool evenly");
            next.insert_ordered(Frame {
                ts: evicted.ts,
                grid,
                layer: index + 1,
                origin: FrameOrigin::DownWritten,
                revision: evicted.revision + 1,
            });
        }
        (evicted, event)
    }

    /// Every stored frame, oldest first.
    pub fn readout(&self) -> Vec<Frame> {
        let mut frames: Vec<Frame> = self.layers.iter().flat_map(|l| l.frames.iter().cloned()).collect();
        frames.sort_by_key(|f| f.ts);
        frames
    }

    /// Cache metadata of [`readout`](Self::readout) without cloning grids.
    pub fn readout_entries(&self) -> Vec<CacheEntry> {
        let mut entries: Vec<CacheEntry> =
            self.layers.iter().flat_map(|l| l.frames.iter().map(CacheEntry::from)).collect();
        entries.sort_by_key(|e| e.ts);
        entries
    }

    pub fn token_count(&self) -> u64 {
        self.layers.iter().map(MemoryLayer::token_count).sum()
    }

    pub fn frame_count(&self) -> usize {
        self.layers.iter().map(MemoryLayer::len).sum()
    }

    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            ingest_count: self.ingest_count,
            dropped_count: self.dropped_count,
            token_count: self.token_count(),
            budget: self.budget,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    index: l.config.index,
                    ticks: l.frames.iter().map(|f| f.ts.tick).collect(),
                    tokens: l.token_count(),
                })
                .collect(),
        }
    }
}

/// Serializable summary of layer membership, used in run reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub ingest_count: u64,
    pub dropped_count: u64,
    pub token_count: u64,
    pub budget: u64,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub index: usize,
    pub ticks: Vec<u64>,
    pub tokens: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(tick: u64) -> Timestamp {
        Timestamp::new(tick, 8)
    }

    fn online() -> PyramidMemoryBank {
        PyramidMemoryBank::new(BankConfig::online(2)).unwrap()
    }

    fn frame(v: [f32; 2]) -> FeatureGrid {
        FeatureGrid::broadcast(16, 16, &v).unwrap()
    }

    #[test]
    fn new_bank_reports_budget() {
        let bank = online();
        assert_eq!(bank.layers().len(), 3);
        assert!(bank.layers().iter().all(MemoryLayer::is_empty));
        assert_eq!(bank.budget(), 832);
        assert_eq!(PyramidMemoryBank::new(BankConfig::offline(2)).unwrap().budget(), 9984);
        let mut bad = BankConfig::online(2);
        bad.layers[2].rate_fps = 1;
        assert!(matches!(PyramidMemoryBank::new(bad), Err(BankError::InvalidConfig(r)) if !r.ok));
    }

    #[test]
    fn routing_prefers_finest_layer() {
        let cfg = BankConfig::online(1);
        assert_eq!(route_frame(&cfg, ts(0)), Some(1));
        assert_eq!(route_frame(&cfg, ts(4)), Some(2));
        assert_eq!(route_frame(&cfg, ts(1)), Some(3));
        assert_eq!(route_frame(&cfg, ts(8)), Some(1));
        assert_eq!(route_frame(&cfg, ts(12)), Some(2));
        assert_eq!(route_frame(&cfg, ts(7)), Some(3));
        assert_eq!(route_frame(&cfg, Timestamp::new(1, 2)), None);
    }

    #[test]
    fn off_grid_frames_are_dropped() {
        // 4 fps and 8 fps layers on a 16 fps stream leave odd ticks unmatched
        let mut cfg = BankConfig::online(1);
        cfg.base_fps = 16;
        cfg.layers[0].rate_fps = 4;
        cfg.layers[1].rate_fps = 8;
        cfg.layers[2].rate_fps = 16;
        assert_eq!(route_frame(&cfg, Timestamp::new(3, 16)), Some(3));
        cfg.layers[2].rate_fps = 8;
        cfg.layers[1].rate_fps = 4;
        cfg.layers[0].rate_fps = 2;
        assert_eq!(route_frame(&cfg, Timestamp::new(3, 16)), None);
        let mut bank = PyramidMemoryBank::new(cfg).unwrap();
        let g = FeatureGrid::filled(16, 16, 1, 1.0).unwrap();
        assert!(bank.ingest(Timestamp::new(3, 16), g).unwrap().is_empty());
        assert_eq!((bank.ingest_count(), bank.dropped_count(), bank.frame_count()), (1, 1, 0));
    }

    #[test]
    fn under_capacity_holds_everything() {
        let mut bank = online();
        assert!(bank.ingest(ts(0), frame([1.0, 0.0])).unwrap().is_empty());
        assert!(bank.ingest(ts(8), frame([0.0, 1.0])).unwrap().is_empty());
        assert_eq!(bank.token_count(), 512);
        assert_eq!(bank.layer(1).len(), 2);
    }

    #[test]
    fn overflow_evicts_older_of_most_similar_pair() {
        let mut bank = online();
        bank.ingest(ts(0), frame([1.0, 0.0])).unwrap();
        bank.ingest(ts(8), frame([1.0, 0.0])).unwrap();
        let events = bank.ingest(ts(16), frame([0.0, 1.0])).unwrap();
        assert_eq!(events, vec![SyncEvent { t_min: ts(0), evicted_from_layer: 1, cascade_depth: 1 }]);
        assert_eq!(bank.layer(1).frames().iter().map(|f| f.ts.tick).collect::<Vec<_>>(), vec![8, 16]);
        let moved = &bank.layer(2).frames()[0];
        assert_eq!(moved.ts, ts(0));
        assert_eq!((moved.grid.height(), moved.grid.width()), (8, 8));
        assert_eq!(moved.origin, FrameOrigin::DownWritten);
        assert_eq!(moved.revision, 1);
        assert_eq!(bank.token_count(), 512 + 64);
    }

    #[test]
    fn equal_similarities_evict_the_oldest() {
        let mut bank = online();
        for t in [0, 8, 16] {
            bank.ingest(ts(t), frame([1.0, 1.0])).unwrap();
        }
        assert_eq!(bank.sync_log()[0].t_min, ts(0));
    }

    /// Full online bank where every layer's most similar pair is its two
    /// oldest frames, once tick 0 is pushed down into it.
    pub(crate) fn saturated_cascade_bank() -> PyramidMemoryBank {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let mut bank = online();
        let layer3 = [1u64, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15];
        for t in 0..16u64 {
            let v = match t {
                0 | 8 | 4 => a,
                12 => b,
                _ => {
                    let p = layer3.iter().position(|&x| x == t).unwrap();
                    if p % 2 == 0 { a } else { b }
                }
            };
            assert!(bank.ingest(ts(t), frame(v)).unwrap().is_empty(), "tick {t}");
        }
        bank
    }

    #[test]
    fn cascade_reaches_last_layer() {
        let mut bank = saturated_cascade_bank();
        assert_eq!(bank.token_count(), 832);
        let events = bank.ingest(ts(16), frame([0.0, 1.0])).unwrap();
        let expected: Vec<SyncEvent> = (1..=3)
            .map(|i| SyncEvent { t_min: ts(0), evicted_from_layer: i, cascade_depth: i })
            .collect();
        assert_eq!(events, expected);
        assert_eq!(bank.sync_log(), &expected[..]);
        // tick 0 left the bank entirely; tick 16 took its place in layer 1
        let ticks: Vec<u64> = bank.readout().iter().map(|f| f.ts.tick).collect();
        assert_eq!(ticks, (1..=16).collect::<Vec<_>>());
        assert_eq!(bank.token_count(), 832);
    }

    #[test]
    fn readout_is_temporal_and_snapshot_is_detached() {
        let mut bank = online();
        assert!(bank.readout().is_empty());
        for t in 0..40u64 {
            let v = [(t as f32).sin(), (t as f32).cos()];
            bank.ingest(ts(t), frame(v)).unwrap();
        }
        let snap = bank.readout();
        assert!(snap.windows(2).all(|w| w[0].ts < w[1].ts));
        assert_eq!(snap.len(), 16);
        assert_eq!(snap.iter().map(Frame::token_count).sum::<u64>(), 832);
        for f in &snap {
            let l = bank.config().layer(f.layer);
            assert_eq!((f.grid.height(), f.grid.width()), (l.res_h, l.res_w));
        }
        let before = snap.clone();
        bank.ingest(ts(40), frame([1.0, 0.0])).unwrap();
        assert_eq!(snap, before);
    }

    #[test]
    fn ingest_rejects_bad_input() {
        let mut bank = online();
        bank.ingest(ts(3), frame([1.0, 0.0])).unwrap();
        assert_eq!(
            bank.ingest(ts(3), frame([1.0, 0.0])),
            Err(BankError::NonMonotonicTimestamp { last: ts(3), got: ts(3) })
        );
        let small = FeatureGrid::filled(8, 8, 2, 1.0).unwrap();
        assert_eq!(
            bank.ingest(ts(4), small),
            Err(BankError::ShapeMismatch { expected: (16, 16, 2), got: (8, 8, 2) })
        );
        assert_eq!(
            bank.ingest(Timestamp::new(9, 2), frame([1.0, 0.0])),
            Err(BankError::BaseFpsMismatch { expected: 8, got: 2 })
        );
        assert_eq!(bank.ingest_count(), 1);
    }

    #[test]
    fn single_layer_one_frame_is_256_tokens() {
        let mut bank = online();
        bank.ingest(ts(0), frame([0.5, 0.5])).unwrap();
        assert_eq!(bank.token_count(), 256);
    }
}
