//! Average pooling and cosine similarity over feature grids.
//!
//! Sums accumulate in `f64` in row-major order and are stored back as `f32`,
//! so results are bit-stable for a given platform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::FeatureGrid;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("cannot block-pool {in_h}x{in_w} to {out_h}x{out_w}: output must evenly divide input")]
    NonDivisibleShape { in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("depth mismatch: {0} vs {1}")]
    DepthMismatch(usize, usize),
}

/// Per-channel spatial mean of one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledVector {
    values: Vec<f32>,
}

impl PooledVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Block average pooling to `out_h x out_w`, channel-wise.
pub fn avg_pool2d(grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid, KernelError> {
    let (h, w, d) = (grid.height(), grid.width(), grid.depth());
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(KernelError::NonDivisibleShape { in_h: h, in_w: w, out_h, out_w });
    }
    if out_h == h && out_w == w {
        return Ok(grid.clone());
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let count = (bh * bw) as f64;
    let src = grid.data();
    let mut out = Vec::with_capacity(out_h * out_w * d);
    let mut acc = vec![0f64; d];
    for a in 0..out_h {
        for b in 0..out_w {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for y in a * bh..(a + 1) * bh {
                for x in b * bw..(b + 1) * bw {
                    let base = (y * w + x) * d;
                    for (slot, &v) in acc.iter_mut().zip(&src[base..base + d]) {
                        *slot += v as f64;
                    }
                }
            }
            out.extend(acc.iter().map(|s| (s / count) as f32));
        }
    }
    Ok(FeatureGrid::new(out_h, out_w, d, out).expect("pooled grid shape is consistent"))
}

pub fn global_avg_pool(grid: &FeatureGrid) -> PooledVector {
    let d = grid.depth();
    let mut acc = vec![0f64; d];
    for cell in grid.data().chunks_exact(d) {
        for (slot, &v) in acc.iter_mut().zip(cell) {
            *slot += v as f64;
        }
    }
    let count = grid.token_count() as f64;
    PooledVector::new(acc.into_iter().map(|s| (s / count) as f32).collect())
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &PooledVector, b: &PooledVector) -> Result<f64, KernelError> {
    if a.depth() != b.depth() {
        return Err(KernelError::DepthMismatch(a.depth(), b.depth()));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of two frames after global average pooling each one.
pub fn pooled_pair_similarity(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64, KernelError> {
    if a.depth() != b.depth() {
        return Err(KernelError::DepthMismatch(a.depth(), b.depth()));
    }
    cosine_similarity(&global_avg_pool(a), &global_avg_pool(b))
}

/// Index `k` of the adjacent pair `(k, k + 1)` with the highest similarity.
///
/// A pair involving a zero vector ranks below every defined similarity and
/// ties go to the earliest pair. Returns `None` for fewer than two grids.
pub(crate) fn most_similar_adjacent_pair<'a, I>(grids: I) -> Option<usize>
where
    I: IntoIterator<Item = &'a FeatureGrid>,
{
    let pooled: Vec<PooledVector> = grids.into_iter().map(global_avg_pool).collect();
    let mut best: Option<(usize, f64)> = None;
    for (k, pair) in pooled.windows(2).enumerate() {
        let sim = cosine_similarity(&pair[0], &pair[1]).unwrap_or(f64::NEG_INFINITY);
        match best {
            Some((_, s)) if sim <= s => {}
            _ => best = Some((k, sim)),
        }
    }
    best.map(|(k, _)| k)
}
