//! Seeded synthetic streams made of scenes.
//!
//! Every scene owns an archetype vector drawn from a standard normal. A
//! frame is its scene's archetype broadcast over the grid plus i.i.d.
//! `N(0, noise_sigma)` noise, so frames within a scene pool to nearly the
//! same direction while different scenes point elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, SceneAnnotation, Stream, StreamFrame};
use crate::types::FeatureGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub seed: u64,
    pub base_fps: u32,
    pub duration_s: u64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub scene_count: usize,
    pub noise_sigma: f32,
}

impl StreamSpec {
    pub fn frame_count(&self) -> u64 {
        self.duration_s * self.base_fps as u64
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::InvalidSpec(msg));
        if self.base_fps == 0 {
            return fail("base_fps must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return fail(format!("dims must be positive, got {}x{}x{}", self.height, self.width, self.depth));
        }
        if self.duration_s == 0 {
            return fail("duration must be positive".into());
        }
        if self.scene_count == 0 || self.scene_count as u64 > self.frame_count() {
            return fail(format!("scene count {} must be in 1..={}", self.scene_count, self.frame_count()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail(format!("noise sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Scene `j` covers ticks `[j N / S, (j + 1) N / S)`.
    pub fn scene_bounds(&self) -> Vec<(u64, u64)> {
        let n = self.frame_count();
        let s = self.scene_count as u64;
        (0..s).map(|j| (j * n / s, (j + 1) * n / s)).collect()
    }
}

pub fn gen_synthetic_stream(spec: &StreamSpec) -> Result<Stream, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenes: Vec<SceneAnnotation> = spec
        .scene_bounds()
        .into_iter()
        .enumerate()
        .map(|(j, (start_tick, end_tick))| SceneAnnotation {
            scene_id: j as u32,
            start_tick,
            end_tick,
            archetype: (0..spec.depth).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();

    let noise = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
    let cells = spec.height * spec.width;
    let mut frames = Vec::with_capacity(spec.frame_count() as usize);
    for scene in &scenes {
        for tick in scene.start_tick..scene.end_tick {
            let mut data = Vec::with_capacity(cells * spec.depth);
            for _ in 0..cells {
                data.extend(scene.archetype.iter().map(|&a| a + noise.sample(&mut rng)));
            }
            let grid = FeatureGrid::new(spec.height, spec.width, spec.depth, data)?;
            frames.push(StreamFrame { tick, grid });
        }
    }
    Ok(Stream {
        base_fps: spec.base_fps,
        height: spec.height,
        width: spec.width,
        depth: spec.depth,
        frames,
        scenes,
    })
}
