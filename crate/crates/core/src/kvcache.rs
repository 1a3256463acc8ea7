//! Metadata model of a prefix KV cache kept in step with a memory readout.
//!
//! Entries are `(timestamp, token_count, revision)` in temporal order. An
//! eviction with boundary `t_min` erases every entry at or after `t_min`;
//! the erased suffix is re-appended from the current readout on the next
//! catch-up. The boundary is inclusive because the evicted frame's own
//! representation changes (or disappears).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::SyncEvent;
use crate::types::{Frame, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("append at {got} is not after the last cached timestamp {last}")]
    OutOfOrderAppend { last: Timestamp, got: Timestamp },
    #[error("no tokens have been processed yet")]
    NoTraffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheEntry {
    pub ts: Timestamp,
    pub token_count: u64,
    pub revision: u32,
}

impl From<&Frame> for CacheEntry {
    fn from(f: &Frame) -> Self {
        Self { ts: f.ts, token_count: f.token_count(), revision: f.revision }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Cache holds more entries than the readout has frames.
    ExtraEntry,
    Timestamp,
    TokenCount,
    Revision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub position: usize,
    pub ts: Timestamp,
    pub kind: DivergenceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    pub first_divergence: Option<Divergence>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheState {
    entries: Vec<CacheEntry>,
    tokens_appended_total: u64,
    tokens_erased_total: u64,
    /// Tokens a model re-encoding the whole readout after every ingest would process.
    full_reprocess_tokens: u64,
    /// Syncs whose boundary lay past every entry.
    empty_syncs: u64,
    /// Catch-ups that found the cache diverged without a preceding sync.
    repairs: u64,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a cache holding exactly `readout`, as if it had been encoded once.
    pub fn rebuild(readout: &[Frame]) -> Self {
        let mut cache = Self::new();
        cache.append_frames(readout).expect("readouts are strictly ordered");
        cache
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn tokens_appended_total(&self) -> u64 {
        self.tokens_appended_total
    }

    pub fn tokens_erased_total(&self) -> u64 {
        self.tokens_erased_total
    }

    pub fn full_reprocess_tokens(&self) -> u64 {
        self.full_reprocess_tokens
    }

    pub fn empty_syncs(&self) -> u64 {
        self.empty_syncs
    }

    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    pub fn token_count(&self) -> u64 {
        self.entries.iter().map(|e| e.token_count).sum()
    }

    pub fn last_ts(&self) -> Option<Timestamp> {
        self.entries.last().map(|e| e.ts)
    }

    /// Appends one entry per frame. Nothing is appended if any frame is out of order.
    pub fn append_frames(&mut self, frames: &[Frame]) -> Result<(), CacheError> {
        let entries: Vec<CacheEntry> = frames.iter().map(CacheEntry::from).collect();
        self.append_entries(&entries)
    }

    pub fn append_entries(&mut self, entries: &[CacheEntry]) -> Result<(), CacheError> {
        let mut last = self.last_ts();
        for e in entries {
            if let Some(l) = last {
                if e.ts <= l {
                    return Err(CacheError::OutOfOrderAppend { last: l, got: e.ts });
                }
            }
            last = Some(e.ts);
        }
        for e in entries {
            self.tokens_appended_total += e.token_count;
            self.entries.push(*e);
        }
        Ok(())
    }

    /// Erases every entry with `ts >= t_min` and returns the erased token count.
    pub fn erase_from(&mut self, t_min: Timestamp) -> u64 {
        let keep = self.entries.partition_point(|e| e.ts < t_min);
        let erased: u64 = self.entries[keep..].iter().map(|e| e.token_count).sum();
        self.entries.truncate(keep);
        self.tokens_erased_total += erased;
        erased
    }

    pub fn sync_on_eviction(&mut self, event: &SyncEvent) -> u64 {
        let before = self.entries.len();
        let erased = self.erase_from(event.t_min);
        if self.entries.len() == before {
            self.empty_syncs += 1;
        }
        erased
    }

    /// Checks that the cache is an exact prefix of `readout`.
    pub fn consistency_check(&self, readout: &[Frame]) -> ConsistencyReport {
        let entries: Vec<CacheEntry> = readout.iter().map(CacheEntry::from).collect();
        self.consistency_check_entries(&entries)
    }

    pub fn consistency_check_entries(&self, readout: &[CacheEntry]) -> ConsistencyReport {
        for (position, entry) in self.entries.iter().enumerate() {
            let kind = match readout.get(position) {
                None => Some(DivergenceKind::ExtraEntry),
                Some(f) if f.ts != entry.ts => Some(DivergenceKind::Timestamp),
                Some(f) if f.token_count != entry.token_count => Some(DivergenceKind::TokenCount),
                Some(f) if f.revision != entry.revision => Some(DivergenceKind::Revision),
                Some(_) => None,
            };
            if let Some(kind) = kind {
                return ConsistencyReport {
                    consistent: false,
                    first_divergence: Some(Divergence { position, ts: entry.ts, kind }),
                };
            }
        }
        ConsistencyReport { consistent: true, first_divergence: None }
    }

    /// Brings the cache up to date with `readout`: appends the frames it has
    /// not seen and charges one full re-encode of the readout to the baseline
    /// counter. A cache that is not a prefix of the readout is first erased
    /// from its first divergent entry; such repairs are counted.
    pub fn catch_up(&mut self, readout: &[CacheEntry]) -> u64 {
        if let Some(d) = self.consistency_check_entries(readout).first_divergence {
            self.repairs += 1;
            self.erase_from(d.ts);
        }
        let start = self.entries.len();
        let appended_before = self.tokens_appended_total;
        self.append_entries(&readout[start..]).expect("readouts are strictly ordered");
        self.full_reprocess_tokens += readout.iter().map(|e| e.token_count).sum::<u64>();
        self.tokens_appended_total - appended_before
    }

    /// `1 - appended / full_reprocess`: the share of encoding work saved by
    /// keeping the cache instead of re-encoding the readout on every ingest.
    pub fn recompute_savings(&self) -> Result<f64, CacheError> {
        if self.full_reprocess_tokens == 0 {
            return Err(CacheError::NoTraffic);
        }
        let ratio = self.tokens_appended_total as f64 / self.full_reprocess_tokens as f64;
        Ok((1.0 - ratio).clamp(0.0, 1.0))
    }
}
