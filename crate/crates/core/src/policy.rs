//! Memory update policies behind one interface: the pyramid bank and the
//! baselines it is compared against (FIFO, token merge, uniform sampling,
//! no compression).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankError, PyramidMemoryBank, SyncEvent};
use crate::config::BankConfig;
use crate::kernels::most_similar_adjacent_pair;
use crate::kvcache::CacheEntry;
use crate::types::{FeatureGrid, Frame, FrameOrigin, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("{policy} needs a capacity of at least {min}, got {got}")]
    CapacityTooSmall { policy: PolicyKind, min: usize, got: usize },
    #[error("timestamp {got} is not after the last ingested timestamp {last}")]
    NonMonotonicTimestamp { last: Timestamp, got: Timestamp },
    #[error("expected a {expected:?} grid, got {got:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("unknown policy `{0}` (expected pyramid, fifo, token-merge, uniform or none)")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Pyramid,
    Fifo,
    TokenMerge,
    Uniform,
    #[serde(rename = "none")]
    NoCompression,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::Pyramid, PolicyKind::Fifo, PolicyKind::TokenMerge, PolicyKind::Uniform, PolicyKind::NoCompression];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Pyramid => "pyramid",
            PolicyKind::Fifo => "fifo",
            PolicyKind::TokenMerge => "token-merge",
            PolicyKind::Uniform => "uniform",
            PolicyKind::NoCompression => "none",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

/// Shape of the grids a policy accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth }
    }

    pub fn tokens(&self) -> u64 {
        (self.height * self.width) as u64
    }

    fn as_tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }
}

pub trait MemoryPolicy: Send {
    fn kind(&self) -> PolicyKind;

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError>;

    fn readout(&self) -> Vec<Frame>;

    /// Cache metadata of [`readout`](Self::readout) without cloning grids.
    fn readout_entries(&self) -> Vec<CacheEntry> {
        self.readout().iter().map(CacheEntry::from).collect()
    }

    fn token_count(&self) -> u64;

    /// Token ceiling, `None` when unbounded.
    fn budget(&self) -> Option<u64>;

    /// Policies that keep the whole stream in shadow storage.
    fn simulator_only(&self) -> bool {
        false
    }
}

/// Monotonic-timestamp and input-shape checks shared by the baselines.
#[derive(Debug, Clone)]
struct InputGuard {
    shape: InputShape,
    last: Option<Timestamp>,
}

impl InputGuard {
    fn new(shape: InputShape) -> Self {
        Self { shape, last: None }
    }

    fn admit(&mut self, ts: Timestamp, grid: &FeatureGrid) -> Result<(), PolicyError> {
        if let Some(last) = self.last {
            if ts <= last {
                return Err(PolicyError::NonMonotonicTimestamp { last, got: ts });
            }
        }
        let got = (grid.height(), grid.width(), grid.depth());
        if got != self.shape.as_tuple() {
            return Err(PolicyError::ShapeMismatch { expected: self.shape.as_tuple(), got });
        }
        self.last = Some(ts);
        Ok(())
    }
}

fn single_layer_event(t_min: Timestamp) -> SyncEvent {
    SyncEvent { t_min, evicted_from_layer: 1, cascade_depth: 1 }
}

/// Adapter over [`PyramidMemoryBank`].
#[derive(Debug, Clone)]
pub struct PyramidPolicy {
    bank: PyramidMemoryBank,
}

impl PyramidPolicy {
    pub fn new(cfg: BankConfig) -> Result<Self, PolicyError> {
        Ok(Self { bank: PyramidMemoryBank::new(cfg)? })
    }

    pub fn bank(&self) -> &PyramidMemoryBank {
        &self.bank
    }
}

impl MemoryPolicy for PyramidPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Pyramid
    }

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError> {
        Ok(self.bank.ingest(ts, grid)?)
    }

    fn readout(&self) -> Vec<Frame> {
        self.bank.readout()
    }

    fn readout_entries(&self) -> Vec<CacheEntry> {
        self.bank.readout_entries()
    }

    fn token_count(&self) -> u64 {
        self.bank.token_count()
    }

    fn budget(&self) -> Option<u64> {
        Some(self.bank.budget())
    }
}

/// One full-resolution queue; overflow evicts the oldest frame.
#[derive(Debug, Clone)]
pub struct FifoPolicy {
    capacity: usize,
    guard: InputGuard,
    frames: std::collections::VecDeque<Frame>,
}

impl FifoPolicy {
    pub fn new(capacity: usize, shape: InputShape) -> Result<Self, PolicyError> {
        if capacity < 1 {
            return Err(PolicyError::CapacityTooSmall { policy: PolicyKind::Fifo, min: 1, got: capacity });
        }
        Ok(Self { capacity, guard: InputGuard::new(shape), frames: Default::default() })
    }
}

impl MemoryPolicy for FifoPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Fifo
    }

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError> {
        self.guard.admit(ts, &grid)?;
        self.frames.push_back(Frame::sampled(ts, grid, 1));
        let mut events = Vec::new();
        while self.frames.len() > self.capacity {
            let old = self.frames.pop_front().expect("over capacity");
            events.push(single_layer_event(old.ts));
        }
        Ok(events)
    }

    fn readout(&self) -> Vec<Frame> {
        self.frames.iter().cloned().collect()
    }

    fn readout_entries(&self) -> Vec<CacheEntry> {
        self.frames.iter().map(CacheEntry::from).collect()
    }

    fn token_count(&self) -> u64 {
        self.frames.iter().map(Frame::token_count).sum()
    }

    fn budget(&self) -> Option<u64> {
        Some(self.capacity as u64 * self.guard.shape.tokens())
    }
}

/// One full-resolution queue; overflow averages the most similar adjacent
/// pair into a single frame at the earlier timestamp.
#[derive(Debug, Clone)]
pub struct TokenMergePolicy {
    capacity: usize,
    guard: InputGuard,
    frames: Vec<Frame>,
}

impl TokenMergePolicy {
    pub fn new(capacity: usize, shape: InputShape) -> Result<Self, PolicyError> {
        if capacity < 2 {
            return Err(PolicyError::CapacityTooSmall { policy: PolicyKind::TokenMerge, min: 2, got: capacity });
        }
        Ok(Self { capacity, guard: InputGuard::new(shape), frames: Vec::with_capacity(capacity + 1) })
    }
}

/// Element-wise unweighted mean of two same-shape grids.
pub fn merge_grids(a: &FeatureGrid, b: &FeatureGrid) -> FeatureGrid {
    debug_assert!(a.same_shape(b));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x as f64 + y as f64) * 0.5) as f32).collect();
    FeatureGrid::new(a.height(), a.width(), a.depth(), data).expect("merged grid keeps the input shape")
}

impl MemoryPolicy for TokenMergePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::TokenMerge
    }

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError> {
        self.guard.admit(ts, &grid)?;
        self.frames.push(Frame::sampled(ts, grid, 1));
        let mut events = Vec::new();
        while self.frames.len() > self.capacity {
            let k = most_similar_adjacent_pair(self.frames.iter().map(|f| &f.grid)).expect("over capacity");
            let later = self.frames.remove(k + 1);
            let earlier = &mut self.frames[k];
            earlier.grid = merge_grids(&earlier.grid, &later.grid);
            earlier.origin = FrameOrigin::Merged;
            earlier.revision = earlier.revision.max(later.revision) + 1;
            events.push(single_layer_event(earlier.ts));
        }
        Ok(events)
    }

    fn readout(&self) -> Vec<Frame> {
        self.frames.clone()
    }

    fn readout_entries(&self) -> Vec<CacheEntry> {
        self.frames.iter().map(CacheEntry::from).collect()
    }

    fn token_count(&self) -> u64 {
        self.frames.iter().map(Frame::token_count).sum()
    }

    fn budget(&self) -> Option<u64> {
        Some(self.capacity as u64 * self.guard.shape.tokens())
    }
}

/// Indices `round(j (n - 1) / (k - 1))` for `j in 0..k`, rounding halves up;
/// all of `0..n` when `n <= k`.
pub fn uniform_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let (n1, k1) = ((n - 1) as u128, (k - 1) as u128);
    (0..k as u128).map(|j| ((2 * j * n1 + k1) / (2 * k1)) as usize).collect()
}

/// Keeps the whole stream and reads out `k` uniformly spaced frames.
/// Simulator-only: its shadow storage is unbounded.
#[derive(Debug, Clone)]
pub struct UniformSamplePolicy {
    k: usize,
    guard: InputGuard,
    shadow: Vec<Frame>,
}

impl UniformSamplePolicy {
    pub fn new(k: usize, shape: InputShape) -> Result<Self, PolicyError> {
        if k < 2 {
            return Err(PolicyError::CapacityTooSmall { policy: PolicyKind::Uniform, min: 2, got: k });
        }
        Ok(Self { k, guard: InputGuard::new(shape), shadow: Vec::new() })
    }

    pub fn frames_seen(&self) -> usize {
        self.shadow.len()
    }
}

impl MemoryPolicy for UniformSamplePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Uniform
    }

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError> {
        self.guard.admit(ts, &grid)?;
        self.shadow.push(Frame::sampled(ts, grid, 1));
        Ok(Vec::new())
    }

    fn readout(&self) -> Vec<Frame> {
        uniform_indices(self.shadow.len(), self.k).into_iter().map(|i| self.shadow[i].clone()).collect()
    }

    fn readout_entries(&self) -> Vec<CacheEntry> {
        uniform_indices(self.shadow.len(), self.k).into_iter().map(|i| CacheEntry::from(&self.shadow[i])).collect()
    }

    fn token_count(&self) -> u64 {
        self.shadow.len().min(self.k) as u64 * self.guard.shape.tokens()
    }

    fn budget(&self) -> Option<u64> {
        Some(self.k as u64 * self.guard.shape.tokens())
    }

    fn simulator_only(&self) -> bool {
        true
    }
}

/// Keeps every frame at full resolution.
#[derive(Debug, Clone)]
pub struct NoCompressionPolicy {
    guard: InputGuard,
    frames: Vec<Frame>,
}

impl NoCompressionPolicy {
    pub fn new(shape: InputShape) -> Self {
        Self { guard: InputGuard::new(shape), frames: Vec::new() }
    }
}

impl MemoryPolicy for NoCompressionPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::NoCompression
    }

    fn ingest(&mut self, ts: Timestamp, grid: FeatureGrid) -> Result<Vec<SyncEvent>, PolicyError> {
        self.guard.admit(ts, &grid)?;
        self.frames.push(Frame::sampled(ts, grid, 1));
        Ok(Vec::new())
    }

    fn readout(&self) -> Vec<Frame> {
        self.frames.clone()
    }

    fn readout_entries(&self) -> Vec<CacheEntry> {
        self.frames.iter().map(CacheEntry::from).collect()
    }

    fn token_count(&self) -> u64 {
        self.frames.len() as u64 * self.guard.shape.tokens()
    }

    fn budget(&self) -> Option<u64> {
        None
    }

    fn simulator_only(&self) -> bool {
        true
    }
}

/// Recipe for building a fresh policy instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PolicySpec {
    Pyramid { config: BankConfig },
    Fifo { capacity: usize, shape: InputShape },
    TokenMerge { capacity: usize, shape: InputShape },
    Uniform { k: usize, shape: InputShape },
    #[serde(rename = "none")]
    NoCompression { shape: InputShape },
}

/// Full-resolution frame count that fits in the pyramid's token budget.
pub fn matched_capacity(cfg: &BankConfig) -> usize {
    (cfg.token_budget() / cfg.layer(1).tokens_per_frame()) as usize
}

impl PolicySpec {
    /// Spec for `kind` with baselines sized to fit within `cfg`'s token budget.
    pub fn matched(kind: PolicyKind, cfg: &BankConfig) -> Self {
        Self::with_capacity(kind, cfg, matched_capacity(cfg))
    }

    /// Spec for `kind` with an explicit baseline frame capacity.
    pub fn with_capacity(kind: PolicyKind, cfg: &BankConfig, capacity: usize) -> Self {
        let first = cfg.layer(1);
        let shape = InputShape::new(first.res_h, first.res_w, cfg.depth);
        match kind {
            PolicyKind::Pyramid => PolicySpec::Pyramid { config: cfg.clone() },
            PolicyKind::Fifo => PolicySpec::Fifo { capacity, shape },
            PolicyKind::TokenMerge => PolicySpec::TokenMerge { capacity, shape },
            PolicyKind::Uniform => PolicySpec::Uniform { k: capacity, shape },
            PolicyKind::NoCompression => PolicySpec::NoCompression { shape },
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::Pyramid { .. } => PolicyKind::Pyramid,
            PolicySpec::Fifo { .. } => PolicyKind::Fifo,
            PolicySpec::TokenMerge { .. } => PolicyKind::TokenMerge,
            PolicySpec::Uniform { .. } => PolicyKind::Uniform,
            PolicySpec::NoCompression { .. } => PolicyKind::NoCompression,
        }
    }

    pub fn build(&self) -> Result<Box<dyn MemoryPolicy>, PolicyError> {
        Ok(match self {
            PolicySpec::Pyramid { config } => Box::new(PyramidPolicy::new(config.clone())?),
            PolicySpec::Fifo { capacity, shape } => Box::new(FifoPolicy::new(*capacity, *shape)?),
            PolicySpec::TokenMerge { capacity, shape } => Box::new(TokenMergePolicy::new(*capacity, *shape)?),
            PolicySpec::Uniform { k, shape } => Box::new(UniformSamplePolicy::new(*k, *shape)?),
            PolicySpec::NoCompression { shape } => Box::new(NoCompressionPolicy::new(*shape)),
        })
    }
}
