//! Reference implementations shared by the integration tests.
//!
//! Everything here is written straight from the definitions, with explicit
//! index arithmetic and no calls into the library's kernels or bank.

#![allow(dead_code)]

use pyramid_memory::{BankConfig, FeatureGrid, LayerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Block mean over `(h / oh) x (w / ow)` windows, one output value at a time.
pub fn naive_pool(data: &[f32], h: usize, w: usize, d: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert!(h.is_multiple_of(oh) && w.is_multiple_of(ow));
    let (bh, bw) = (h / oh, w / ow);
    let mut out = vec![0f32; oh * ow * d];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..d {
                let mut sum = 0f64;
                for dy in 0..bh {
                    for dx in 0..bw {
                        let (y, x) = (oy * bh + dy, ox * bw + dx);
                        sum += data[(y * w + x) * d + c] as f64;
                    }
                }
                out[(oy * ow + ox) * d + c] = (sum / (bh * bw) as f64) as f32;
            }
        }
    }
    out
}

/// Per-channel mean over every cell.
pub fn naive_channel_means(data: &[f32], d: usize) -> Vec<f32> {
    let cells = data.len() / d;
    (0..d)
        .map(|c| {
            let sum: f64 = (0..cells).map(|i| data[i * d + c] as f64).sum();
            (sum / cells as f64) as f32
        })
        .collect()
}

/// Cosine of two vectors; `None` if either has zero norm.
pub fn naive_cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum();
    let nb: f64 = b.iter().map(|&y| y as f64 * y as f64).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Index of the first adjacent pair with the strictly highest pooled cosine,
/// treating an undefined cosine as negative infinity.
pub fn naive_argmax_pair(grids: &[Vec<f32>], d: usize) -> usize {
    let means: Vec<Vec<f32>> = grids.iter().map(|g| naive_channel_means(g, d)).collect();
    let mut best_k = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..means.len() - 1 {
        let s = naive_cosine(&means[k], &means[k + 1]).unwrap_or(f64::NEG_INFINITY);
        if k == 0 || s > best {
            best_k = k;
            best = s;
        }
    }
    best_k
}

#[derive(Debug, Clone)]
pub struct RefFrame {
    pub tick: u64,
    pub data: Vec<f32>,
}

/// Straight-line pyramid: route, push, then repeatedly evict the shallowest
/// over-capacity layer's older most-similar frame and pool it one layer down.
pub struct RefBank {
    pub cfg: BankConfig,
    pub layers: Vec<Vec<RefFrame>>,
    pub dropped: u64,
    /// `(evicted tick, layer, position in this ingest's chain)`
    pub events: Vec<(u64, usize, usize)>,
}

impl RefBank {
    pub fn new(cfg: BankConfig) -> Self {
        let n = cfg.layers.len();
        Self { cfg, layers: vec![Vec::new(); n], dropped: 0, events: Vec::new() }
    }

    fn res(&self, i: usize) -> (usize, usize) {
        let l: &LayerConfig = &self.cfg.layers[i];
        (l.res_h, l.res_w)
    }

    pub fn ingest(&mut self, tick: u64, data: &[f32]) -> Vec<(u64, usize, usize)> {
        let base = self.cfg.base_fps as u64;
        let d = self.cfg.depth;
        let mut dest = None;
        for (i, l) in self.cfg.layers.iter().enumerate() {
            let rate = (l.rate_fps as u64).min(base);
            if (tick * rate).is_multiple_of(base) {
                dest = Some(i);
                break;
            }
        }
        let Some(i) = dest else {
            self.dropped += 1;
            return Vec::new();
        };
        let (h0, w0) = self.res(0);
        let (h, w) = self.res(i);
        self.layers[i].push(RefFrame { tick, data: naive_pool(data, h0, w0, d, h, w) });

        let mut events = Vec::new();
        while let Some(i) = (0..self.layers.len()).find(|&i| self.layers[i].len() > self.cfg.layers[i].capacity) {
            let grids: Vec<Vec<f32>> = self.layers[i].iter().map(|f| f.data.clone()).collect();
            let k = naive_argmax_pair(&grids, d);
            let evicted = self.layers[i].remove(k);
            events.push((evicted.tick, i + 1, events.len() + 1));
            if i + 1 < self.layers.len() {
                let (h, w) = self.res(i);
                let (nh, nw) = self.res(i + 1);
                let pooled = RefFrame { tick: evicted.tick, data: naive_pool(&evicted.data, h, w, d, nh, nw) };
                let pos = self.layers[i + 1].iter().position(|f| f.tick > evicted.tick).unwrap_or(self.layers[i + 1].len());
                self.layers[i + 1].insert(pos, pooled);
            }
        }
        self.events.extend_from_slice(&events);
        events
    }

    pub fn tokens(&self) -> u64 {
        (0..self.layers.len())
            .map(|i| {
                let (h, w) = self.res(i);
                (self.layers[i].len() * h * w) as u64
            })
            .sum()
    }
}

/// A small random pyramid: 2 to 4 layers, beta 2, base 4 or 8 fps, tiny capacities.
pub fn random_config(rng: &mut ChaCha8Rng, depth: usize) -> BankConfig {
    let n = rng.random_range(2..=4usize);
    let base_fps = if rng.random_bool(0.5) { 8 } else { 4 };
    let all_rates = [1u32, 2, 4, 8, 16];
    let mut rates: Vec<u32> = loop {
        let mut pick: Vec<u32> = all_rates.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
        pick.truncate(n);
        if pick.len() == n {
            break pick;
        }
    };
    rates.sort_unstable();
    let top = 1usize << (n - 1);
    let layers = (0..n)
        .map(|i| LayerConfig {
            index: i + 1,
            rate_fps: rates[i],
            capacity: rng.random_range(1..=4),
            res_h: (2 * top) >> i,
            res_w: top >> i,
        })
        .collect();
    let cfg = BankConfig { layers, beta: 2, base_fps, depth };
    assert!(cfg.validate().ok, "{}", cfg.validate());
    cfg
}

/// Frames for oracle runs: a mix of Gaussian grids, exact small-integer
/// grids (which produce exact similarity ties) and all-zero grids.
pub fn random_frames(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, d: usize) -> Vec<(u64, Vec<f32>)> {
    let palette: Vec<Vec<f32>> =
        (0..3).map(|_| (0..d).map(|_| rng.random_range(-2i32..=2) as f32).collect()).collect();
    let mut tick = 0u64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        tick += rng.random_range(1..=2);
        let roll: f64 = rng.random();
        let data: Vec<f32> = if roll < 0.6 {
            (0..h * w * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
        } else if roll < 0.9 {
            let c = &palette[rng.random_range(0..palette.len())];
            (0..h * w).flat_map(|_| c.iter().copied()).collect()
        } else {
            vec![0.0; h * w * d]
        };
        out.push((tick, data));
    }
    out
}

pub fn grid(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureGrid {
    FeatureGrid::new(h, w, d, data).expect("test grids are finite and well-shaped")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

/// Outcome of replaying one seeded stream through the bank and the reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleStats {
    pub frames: u64,
    pub evictions: u64,
    pub max_grid_diff: f64,
}

/// Replays seed `seed` through [`RefBank`] and the library bank side by side,
/// checking layer contents after every ingest. With `check_cache`, also keeps
/// an incrementally synced cache and compares it with a fresh rebuild.
pub fn replay_against_reference(seed: u64, check_cache: bool) -> Result<OracleStats, String> {
    use pyramid_memory::{CacheState, PyramidMemoryBank, Timestamp};

    let mut rng = rng(seed);
    let depth = rng.random_range(1..=8usize);
    let cfg = random_config(&mut rng, depth);
    let n = rng.random_range(1..=64usize);
    let (h, w) = (cfg.layers[0].res_h, cfg.layers[0].res_w);
    let frames = random_frames(&mut rng, n, h, w, depth);

    let mut bank = PyramidMemoryBank::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut reference = RefBank::new(cfg.clone());
    let mut cache = CacheState::new();
    let mut stats = OracleStats::default();
    let fail = |step: usize, what: String| Err(format!("seed {seed} step {step}: {what}"));

    for (step, (tick, data)) in frames.into_iter().enumerate() {
        let ts = Timestamp::new(tick, cfg.base_fps);
        let events = bank.ingest(ts, grid(h, w, depth, data.clone())).map_err(|e| e.to_string())?;
        let ref_events = reference.ingest(tick, &data);
        stats.frames += 1;
        stats.evictions += events.len() as u64;

        let got_events: Vec<(u64, usize, usize)> =
            events.iter().map(|e| (e.t_min.tick, e.evicted_from_layer, e.cascade_depth)).collect();
        if got_events != ref_events {
            return fail(step, format!("sync events {got_events:?} != reference {ref_events:?}"));
        }
        if bank.dropped_count() != reference.dropped {
            return fail(step, format!("dropped {} != reference {}", bank.dropped_count(), reference.dropped));
        }
        for (i, expected) in reference.layers.iter().enumerate() {
            let got = bank.layer(i + 1).frames();
            let got_ticks: Vec<u64> = got.iter().map(|f| f.ts.tick).collect();
            let want_ticks: Vec<u64> = expected.iter().map(|f| f.tick).collect();
            if got_ticks != want_ticks {
                return fail(step, format!("layer {} ticks {got_ticks:?} != reference {want_ticks:?}", i + 1));
            }
            for (g, e) in got.iter().zip(expected) {
                if g.layer != i + 1 {
                    return fail(step, format!("frame {} tagged layer {} but stored in {}", g.ts.tick, g.layer, i + 1));
                }
                let diff = max_abs_diff(g.grid.data(), &e.data);
                stats.max_grid_diff = stats.max_grid_diff.max(diff);
                if diff > 1e-6 {
                    return fail(step, format!("layer {} frame {} grid differs by {diff:e}", i + 1, g.ts.tick));
                }
            }
        }
        if bank.token_count() != reference.tokens() {
            return fail(step, format!("tokens {} != reference {}", bank.token_count(), reference.tokens()));
        }

        if check_cache {
            for e in &events {
                cache.sync_on_eviction(e);
            }
            let readout = bank.readout();
            let prefix = cache.consistency_check(&readout);
            if !prefix.consistent {
                return fail(step, format!("synced cache is not a prefix of the readout: {:?}", prefix.first_divergence));
            }
            cache.catch_up(&bank.readout_entries());
            let rebuilt = CacheState::rebuild(&readout);
            if cache.entries() != rebuilt.entries() {
                return fail(step, "incremental cache differs from a rebuild over the readout".into());
            }
            let net = cache.tokens_appended_total() - cache.tokens_erased_total();
            if net != cache.token_count() || net != bank.token_count() {
                return fail(
                    step,
                    format!("appended - erased = {net}, cache holds {}, bank holds {}", cache.token_count(), bank.token_count()),
                );
            }
            if cache.repairs() != 0 {
                return fail(step, "catch-up needed a repair".into());
            }
        }
    }
    Ok(stats)
}
