//! Value types shared by the bank, the baseline policies and the harness.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point on a stream's frame grid, counted in whole frame intervals.
///
/// `tick / base_fps` seconds since stream start. Comparisons between
/// timestamps of different rates use exact integer cross-multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub tick: u64,
    pub base_fps: u32,
}

impl Timestamp {
    pub fn new(tick: u64, base_fps: u32) -> Self {
        debug_assert!(base_fps > 0, "base_fps must be positive");
        Self { tick, base_fps }
    }

    pub fn seconds(&self) -> f64 {
        self.tick as f64 / self.base_fps as f64
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.tick as u128 * other.base_fps as u128;
        let rhs = other.tick as u128 * self.base_fps as u128;
        lhs.cmp(&rhs).then(self.base_fps.cmp(&other.base_fps))
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}fps", self.tick, self.base_fps)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {h}x{w}x{d}")]
    ZeroDimension { h: usize, w: usize, d: usize },
    #[error("grid data has {actual} values, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("grid value at index {index} is not finite")]
    NonFinite { index: usize },
}

/// An `H x W x D` spatial feature map stored row-major (h, then w, then d).
///
/// One spatial cell is one visual token, so a grid costs `H * W` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self, GridError> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(GridError::ZeroDimension { h: height, w: width, d: depth });
        }
        let expected = height * width * depth;
        if data.len() != expected {
            return Err(GridError::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self { height, width, depth, data })
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f32) -> Result<Self, GridError> {
        Self::new(height, width, depth, vec![value; height * width * depth])
    }

    /// Broadcasts a per-channel vector over every spatial cell.
    pub fn broadcast(height: usize, width: usize, channels: &[f32]) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(height * width * channels.len());
        for _ in 0..height * width {
            data.extend_from_slice(channels);
        }
        Self::new(height, width, channels.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn token_count(&self) -> u64 {
        (self.height * self.width) as u64
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[(h * self.width + w) * self.depth + d]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.depth == other.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrigin {
    /// Written straight from the stream into its routed layer.
    StreamSampled,
    /// Evicted from a shallower layer and pooled down into this one.
    DownWritten,
    /// Produced by averaging two adjacent frames (token-merge baseline).
    Merged,
}

/// A timestamped grid together with the layer that currently owns it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub ts: Timestamp,
    pub grid: FeatureGrid,
    /// 1-based layer index.
    pub layer: usize,
    pub origin: FrameOrigin,
    /// Bumped every time the stored representation of this timestamp changes.
    pub revision: u32,
}

impl Frame {
    pub fn sampled(ts: Timestamp, grid: FeatureGrid, layer: usize) -> Self {
        Self { ts, grid, layer, origin: FrameOrigin::StreamSampled, revision: 0 }
    }

    pub fn token_count(&self) -> u64 {
        self.grid.token_count()
    }
}
