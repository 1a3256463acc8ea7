//! Stream generation, stream files, evaluation protocols and reports.

pub mod protocol;
pub mod report;
pub mod streamfile;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyError;
use crate::types::{FeatureGrid, GridError};

pub use protocol::{
    compare_policies, resample, run_protocol, run_sliding_window_protocol, run_streaming_protocol, scene_recall,
    temporal_coverage, Comparison, ComparisonEntry, Protocol, ResampledFrame,
};
pub use report::{Aggregates, QueryRecord, ReportContext, RunReport};
pub use streamfile::{decode_stream, encode_stream, load_stream, save_stream, StreamFileError};
pub use synth::{gen_synthetic_stream, StreamSpec};

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("query tick {tick} is outside the stream (last valid query tick is {max})")]
    QueryOutOfRange { tick: u64, max: u64 },
    #[error("query ticks must be sorted ascending")]
    QueriesNotSorted,
    #[error("protocol fps must be positive")]
    ZeroProtocolFps,
    #[error("comparison needs at least two policies, got {0}")]
    TooFewPolicies(usize),
    #[error("policy `{0}` appears more than once")]
    DuplicatePolicy(String),
}

/// One scene: ticks `[start_tick, end_tick)` sharing an archetype direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub scene_id: u32,
    pub start_tick: u64,
    pub end_tick: u64,
    pub archetype: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub tick: u64,
    pub grid: FeatureGrid,
}

/// Frames at `base_fps` with their scene annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub base_fps: u32,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub frames: Vec<StreamFrame>,
    pub scenes: Vec<SceneAnnotation>,
}

impl Stream {
    /// One past the last frame's tick: the latest valid query tick.
    pub fn end_tick(&self) -> u64 {
        self.frames.last().map_or(0, |f| f.tick + 1)
    }

    pub fn info(&self) -> StreamInfo {
        StreamInfo {
            base_fps: self.base_fps,
            height: self.height,
            width: self.width,
            depth: self.depth,
            frame_count: self.frames.len() as u64,
            scenes: self.scenes.iter().map(|s| (s.scene_id, s.start_tick, s.end_tick)).collect(),
        }
    }
}

/// Stream header plus scene table, without frame payloads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub base_fps: u32,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub frame_count: u64,
    pub scenes: Vec<(u32, u64, u64)>,
}
