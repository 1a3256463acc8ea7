//! Bounded-memory pyramid feature cache for streaming video tokens.
//!
//! Frames enter a layered memory bank: shallow layers sample slowly and keep
//! full-resolution grids, deeper layers sample faster at lower resolution.
//! Overflow evicts the older frame of the most similar adjacent pair and
//! pools it down one layer. A metadata model of a prefix KV cache tracks the
//! erasures this causes. Baseline policies and a stream harness compare the
//! bank against FIFO, token merging, uniform sampling and no compression.

pub mod bank;
pub mod cli;
pub mod config;
pub mod harness;
pub mod kernels;
pub mod kvcache;
pub mod policy;
pub mod types;

pub use bank::{route_frame, BankError, MemoryLayer, PyramidMemoryBank, SyncEvent};
pub use config::{parse_config, validate_config, BankConfig, ConfigError, LayerConfig, ValidationReport, Violation};
pub use kernels::{avg_pool2d, cosine_similarity, global_avg_pool, pooled_pair_similarity, KernelError, PooledVector};
pub use kvcache::{CacheEntry, CacheError, CacheState, ConsistencyReport};
pub use policy::{InputShape, MemoryPolicy, PolicyError, PolicyKind, PolicySpec};
pub use types::{FeatureGrid, Frame, FrameOrigin, GridError, Timestamp};
