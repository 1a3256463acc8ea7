mod common;

use common::*;
use pyramid_memory::{avg_pool2d, pooled_pair_similarity, BankConfig, PyramidMemoryBank, Timestamp};
use rand::Rng;

#[test]
fn bank_matches_reference_simulator() {
    let mut evictions = 0;
    for seed in 0..300 {
        let stats = replay_against_reference(seed, false).unwrap();
        evictions += stats.evictions;
    }
    assert!(evictions > 1000, "oracle streams should exercise eviction, saw {evictions}");
}

#[test]
fn incremental_cache_matches_rebuild() {
    for seed in 10_000..10_300 {
        replay_against_reference(seed, true).unwrap();
    }
}

#[test]
fn pooling_matches_block_mean() {
    let mut rng = rng(42);
    for _ in 0..200 {
        let d = rng.random_range(1..=6);
        let (oh, ow) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (oh * rng.random_range(1..=4), ow * rng.random_range(1..=4));
        let data: Vec<f32> = (0..h * w * d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let pooled = avg_pool2d(&grid(h, w, d, data.clone()), oh, ow).unwrap();
        assert!(max_abs_diff(pooled.data(), &naive_pool(&data, h, w, d, oh, ow)) <= 1e-6);
    }
}

#[test]
fn similarity_matches_naive_cosine() {
    let mut rng = rng(43);
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let a: Vec<f32> = (0..4 * 4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..4 * 4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = pooled_pair_similarity(&grid(4, 4, d, a.clone()), &grid(4, 4, d, b.clone())).unwrap();
        let want = naive_cosine(&naive_channel_means(&a, d), &naive_channel_means(&b, d)).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

/// One-layer bank of capacity `cap` over 1x1 grids, so eviction is visible directly.
fn single_layer(cap: usize, d: usize) -> PyramidMemoryBank {
    let mut cfg = BankConfig::online(d);
    cfg.layers.truncate(1);
    cfg.layers[0].rate_fps = cfg.base_fps;
    cfg.layers[0].capacity = cap;
    cfg.layers[0].res_h = 1;
    cfg.layers[0].res_w = 1;
    PyramidMemoryBank::new(cfg).unwrap()
}

fn ticks(bank: &PyramidMemoryBank) -> Vec<u64> {
    bank.layer(1).frames().iter().map(|f| f.ts.tick).collect()
}

#[test]
fn eviction_follows_argmax_oracle() {
    let mut rng = rng(44);
    for _ in 0..200 {
        let d = rng.random_range(1..=4);
        let cap = rng.random_range(1..=5);
        let mut bank = single_layer(cap, d);
        let mut stored: Vec<(u64, Vec<f32>)> = Vec::new();
        for t in 0..20u64 {
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.ingest(Timestamp::new(t, 8), grid(1, 1, d, v.clone())).unwrap();
            stored.push((t, v));
            if stored.len() > cap {
                let grids: Vec<Vec<f32>> = stored.iter().map(|(_, v)| v.clone()).collect();
                stored.remove(naive_argmax_pair(&grids, d));
            }
            assert_eq!(ticks(&bank), stored.iter().map(|(t, _)| *t).collect::<Vec<_>>());
        }
    }
}

#[test]
fn ties_evict_earliest_pair_and_zero_vectors_rank_last() {
    // all four frames point the same way: every pair ties, so (0, 1) loses frame 0
    let mut bank = single_layer(3, 2);
    for t in 0..4 {
        bank.ingest(Timestamp::new(t, 8), grid(1, 1, 2, vec![1.0, 2.0])).unwrap();
    }
    assert_eq!(ticks(&bank), vec![1, 2, 3]);

    // a zero frame makes its pairs undefined; the defined pair (2, 3) is chosen
    let mut bank = single_layer(3, 2);
    for (t, v) in [(0, [0.0, 0.0]), (1, [1.0, 0.0]), (2, [0.0, 1.0]), (3, [0.0, 2.0])] {
        bank.ingest(Timestamp::new(t, 8), grid(1, 1, 2, v.to_vec())).unwrap();
    }
    assert_eq!(ticks(&bank), vec![0, 1, 3]);

    // only undefined pairs: the earliest goes
    let mut bank = single_layer(2, 1);
    for t in 0..3 {
        bank.ingest(Timestamp::new(t, 8), grid(1, 1, 1, vec![0.0])).unwrap();
    }
    assert_eq!(ticks(&bank), vec![1, 2]);
}

#[test]
fn online_preset_cascade_matches_reference() {
    let cfg = BankConfig::online(3);
    let mut rng = rng(45);
    let mut bank = PyramidMemoryBank::new(cfg.clone()).unwrap();
    let mut reference = RefBank::new(cfg);
    for t in 0..400u64 {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let events = bank.ingest(Timestamp::new(t, 8), grid(16, 16, 3, data.clone())).unwrap();
        let want = reference.ingest(t, &data);
        let got: Vec<(u64, usize, usize)> =
            events.iter().map(|e| (e.t_min.tick, e.evicted_from_layer, e.cascade_depth)).collect();
        assert_eq!(got, want, "tick {t}");
        assert!(bank.token_count() <= 832);
    }
    assert!(reference.events.iter().any(|e| e.2 == 3), "expected a three-step cascade");
}
