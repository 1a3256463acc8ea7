//! Streaming and sliding-window evaluation protocols.
//!
//! Both resample the stream to a protocol rate (2 fps by default) by picking,
//! for each protocol instant `j / fps`, the stream frame nearest to it (ties
//! go to the earlier frame). The frame for instant `j` arrives at
//! `(j + 1) / fps`, the end of its sampling interval, so a query at time `t`
//! has been offered exactly `floor(t * fps)` frames.
//!
//! * streaming: one policy sees every resampled frame from the start, and is
//!   queried as the stream advances;
//! * sliding window: each query builds a fresh policy fed only the frames
//!   whose arrival times fall in `(t - window, t]`.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{digest, Aggregates, QueryRecord, RunReport};
use super::{HarnessError, SceneAnnotation, Stream};
use crate::kvcache::CacheState;
use crate::policy::{MemoryPolicy, PolicySpec};
use crate::types::{Frame, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum Protocol {
    Streaming { fps: u32 },
    SlidingWindow { window_s: u32, fps: u32 },
}

impl Protocol {
    pub const DEFAULT_FPS: u32 = 2;
    pub const DEFAULT_WINDOW_S: u32 = 32;

    pub fn streaming() -> Self {
        Protocol::Streaming { fps: Self::DEFAULT_FPS }
    }

    pub fn sliding_window() -> Self {
        Protocol::SlidingWindow { window_s: Self::DEFAULT_WINDOW_S, fps: Self::DEFAULT_FPS }
    }

    pub fn fps(&self) -> u32 {
        match *self {
            Protocol::Streaming { fps } | Protocol::SlidingWindow { fps, .. } => fps,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Streaming { .. } => "streaming",
            Protocol::SlidingWindow { .. } => "sliding",
        }
    }
}

/// A stream frame selected for protocol instant `instant / fps` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResampledFrame {
    pub instant: u64,
    pub frame_index: usize,
}

/// Nearest-frame resampling of `stream` onto a `fps` grid.
///
/// Instants past the stream's end are not generated; consecutive instants
/// that select the same frame keep only the first.
pub fn resample(stream: &Stream, fps: u32) -> Result<Vec<ResampledFrame>, HarnessError> {
    if fps == 0 {
        return Err(HarnessError::ZeroProtocolFps);
    }
    let (b, f) = (stream.base_fps as u128, fps as u128);
    let end = stream.end_tick() as u128;
    let ticks: Vec<u128> = stream.frames.iter().map(|fr| fr.tick as u128).collect();
    let mut out: Vec<ResampledFrame> = Vec::new();
    let mut j: u128 = 0;
    // instant j/fps lies inside the stream iff j * base_fps < end * fps
    while j * b < end * f {
        // distances are compared on the scaled axis: |tick * fps - j * base_fps|
        let target = j * b;
        let after = ticks.partition_point(|&t| t * f < target);
        let pick = match (after.checked_sub(1), ticks.get(after)) {
            (Some(before), Some(&next)) => {
                let d_before = target - ticks[before] * f;
                let d_next = next * f - target;
                if d_before <= d_next {
                    before
                } else {
                    after
                }
            }
            (Some(before), None) => before,
            (None, Some(_)) => after,
            (None, None) => break,
        };
        if out.last().is_none_or(|r| r.frame_index != pick) {
            out.push(ResampledFrame { instant: j as u64, frame_index: pick });
        }
        j += 1;
    }
    Ok(out)
}

fn check_queries(stream: &Stream, query_ticks: &[u64]) -> Result<(), HarnessError> {
    if query_ticks.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::QueriesNotSorted);
    }
    let max = stream.end_tick();
    if let Some(&tick) = query_ticks.iter().find(|&&t| t > max) {
        return Err(HarnessError::QueryOutOfRange { tick, max });
    }
    Ok(())
}

/// Fraction of scenes begun before `up_to_tick` that still have at least
/// one readout frame inside them. Zero when no scene has begun.
pub fn scene_recall(readout: &[Frame], annotations: &[SceneAnnotation], up_to_tick: u64) -> f64 {
    let elapsed: Vec<&SceneAnnotation> = annotations.iter().filter(|s| s.start_tick < up_to_tick).collect();
    if elapsed.is_empty() {
        return 0.0;
    }
    let hit = elapsed
        .iter()
        .filter(|s| readout.iter().any(|f| (s.start_tick..s.end_tick).contains(&f.ts.tick)))
        .count();
    hit as f64 / elapsed.len() as f64
}

/// Share of the elapsed history `[0, up_to_tick)` that lies after the
/// oldest retained frame.
pub fn temporal_coverage(readout: &[Frame], up_to_tick: u64) -> f64 {
    match readout.first() {
        Some(first) if up_to_tick > 0 => {
            let reach = up_to_tick.saturating_sub(first.ts.tick);
            reach as f64 / up_to_tick as f64
        }
        _ => 0.0,
    }
}

struct Runner<'a> {
    stream: &'a Stream,
    policy: Box<dyn MemoryPolicy>,
    cache: CacheState,
    ingested: u64,
    last_tick: Option<u64>,
    peak_tokens: u64,
    sync_events: u64,
}

impl<'a> Runner<'a> {
    fn new(stream: &'a Stream, spec: &PolicySpec) -> Result<Self, HarnessError> {
        Ok(Self {
            stream,
            policy: spec.build()?,
            cache: CacheState::new(),
            ingested: 0,
            last_tick: None,
            peak_tokens: 0,
            sync_events: 0,
        })
    }

    fn ingest(&mut self, frame_index: usize) -> Result<(), HarnessError> {
        let frame = &self.stream.frames[frame_index];
        let ts = Timestamp::new(frame.tick, self.stream.base_fps);
        let events = self.policy.ingest(ts, frame.grid.clone())?;
        for e in &events {
            self.cache.sync_on_eviction(e);
        }
        self.sync_events += events.len() as u64;
        self.cache.catch_up(&self.policy.readout_entries());
        self.ingested += 1;
        self.last_tick = Some(frame.tick);
        self.peak_tokens = self.peak_tokens.max(self.policy.token_count());
        Ok(())
    }

    fn record(&self, query_tick: u64) -> QueryRecord {
        let readout = self.policy.readout();
        let up_to = self.last_tick.map_or(0, |t| t + 1);
        QueryRecord {
            query_tick,
            frames_offered: self.ingested,
            frames_in_readout: readout.len() as u64,
            token_count: self.policy.token_count(),
            scene_recall: scene_recall(&readout, &self.stream.scenes, up_to),
            temporal_coverage: temporal_coverage(&readout, up_to),
        }
    }
}

fn finish(
    spec: &PolicySpec,
    protocol: Protocol,
    budget: Option<u64>,
    simulator_only: bool,
    queries: Vec<QueryRecord>,
    totals: Totals,
    started: Instant,
) -> RunReport {
    let n = queries.len().max(1) as f64;
    let mean_recall = queries.iter().map(|q| q.scene_recall).sum::<f64>() / n;
    let mean_coverage = queries.iter().map(|q| q.temporal_coverage).sum::<f64>() / n;
    let over_budget = budget.map_or(0, |b| queries.iter().filter(|q| q.token_count > b).count() as u64);
    let recompute_savings = (totals.full_reprocess > 0)
        .then(|| (1.0 - totals.appended as f64 / totals.full_reprocess as f64).clamp(0.0, 1.0));
    RunReport {
        policy: spec.kind(),
        spec: spec.clone(),
        protocol,
        config_digest: digest(&(spec, protocol)),
        budget,
        simulator_only,
        queries,
        aggregates: Aggregates {
            mean_recall,
            mean_coverage,
            peak_tokens: totals.peak_tokens,
            frames_ingested: totals.ingested,
            tokens_appended: totals.appended,
            tokens_erased: totals.erased,
            recompute_savings,
            sync_events: totals.sync_events,
            cache_repairs: totals.repairs,
            queries_over_budget: over_budget,
        },
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

#[derive(Default)]
struct Totals {
    ingested: u64,
    appended: u64,
    erased: u64,
    full_reprocess: u64,
    repairs: u64,
    sync_events: u64,
    peak_tokens: u64,
}

impl Totals {
    fn absorb(&mut self, r: &Runner<'_>) {
        self.ingested += r.ingested;
        self.appended += r.cache.tokens_appended_total();
        self.erased += r.cache.tokens_erased_total();
        self.full_reprocess += r.cache.full_reprocess_tokens();
        self.repairs += r.cache.repairs();
        self.sync_events += r.sync_events;
        self.peak_tokens = self.peak_tokens.max(r.peak_tokens);
    }
}

/// One policy sees the resampled stream from the start; at each query tick
/// its readout is scored, then ingestion resumes where it stopped.
pub fn run_streaming_protocol(
    stream: &Stream,
    spec: &PolicySpec,
    fps: u32,
    query_ticks: &[u64],
) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    check_queries(stream, query_ticks)?;
    let schedule = resample(stream, fps)?;
    let mut runner = Runner::new(stream, spec)?;
    let (b, f) = (stream.base_fps as u128, fps as u128);
    let mut next = 0;
    let mut queries = Vec::with_capacity(query_ticks.len());
    for &q in query_ticks {
        while next < schedule.len() && (schedule[next].instant as u128 + 1) * b <= q as u128 * f {
            runner.ingest(schedule[next].frame_index)?;
            next += 1;
        }
        queries.push(runner.record(q));
    }
    let mut totals = Totals::default();
    totals.absorb(&runner);
    let (budget, sim) = (runner.policy.budget(), runner.policy.simulator_only());
    Ok(finish(spec, Protocol::Streaming { fps }, budget, sim, queries, totals, started))
}

/// For each query at `t`, a fresh policy ingests the resampled frames with
/// arrival times in `(t - window_s, t]` and is scored once.
pub fn run_sliding_window_protocol(
    stream: &Stream,
    spec: &PolicySpec,
    window_s: u32,
    fps: u32,
    query_ticks: &[u64],
) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    check_queries(stream, query_ticks)?;
    let schedule = resample(stream, fps)?;
    let (b, f) = (stream.base_fps as u128, fps as u128);
    let window = window_s as u128 * b * f;
    let mut queries = Vec::with_capacity(query_ticks.len());
    let mut totals = Totals::default();
    let probe = spec.build()?;
    let (budget, sim) = (probe.budget(), probe.simulator_only());
    for &q in query_ticks {
        let hi = q as u128 * f;
        let lo = hi.saturating_sub(window);
        let arrival = |r: &ResampledFrame| (r.instant as u128 + 1) * b;
        let first = schedule.partition_point(|r| arrival(r) <= lo);
        let last = schedule.partition_point(|r| arrival(r) <= hi);
        let mut runner = Runner::new(stream, spec)?;
        for r in &schedule[first..last] {
            runner.ingest(r.frame_index)?;
        }
        queries.push(runner.record(q));
        totals.absorb(&runner);
    }
    Ok(finish(spec, Protocol::SlidingWindow { window_s, fps }, budget, sim, queries, totals, started))
}

pub fn run_protocol(
    stream: &Stream,
    spec: &PolicySpec,
    protocol: Protocol,
    query_ticks: &[u64],
) -> Result<RunReport, HarnessError> {
    match protocol {
        Protocol::Streaming { fps } => run_streaming_protocol(stream, spec, fps, query_ticks),
        Protocol::SlidingWindow { window_s, fps } => {
            run_sliding_window_protocol(stream, spec, window_s, fps, query_ticks)
        }
    }
}

#[derive(Debug)]
pub struct ComparisonEntry {
    pub spec: PolicySpec,
    pub result: Result<RunReport, HarnessError>,
}

/// Per-policy runs in input order plus a ranking by mean scene recall.
#[derive(Debug)]
pub struct Comparison {
    pub protocol: Protocol,
    pub entries: Vec<ComparisonEntry>,
    /// Indices into `entries`: successful runs by descending mean recall
    /// (ties keep input order), then failed runs in input order.
    pub ranking: Vec<usize>,
}

impl Comparison {
    pub fn failures(&self) -> impl Iterator<Item = &ComparisonEntry> {
        self.entries.iter().filter(|e| e.result.is_err())
    }
}

/// Runs every policy independently (in parallel on the current rayon pool).
/// A failing policy does not abort the others.
pub fn compare_policies(
    stream: &Stream,
    specs: &[PolicySpec],
    protocol: Protocol,
    query_ticks: &[u64],
) -> Result<Comparison, HarnessError> {
    if specs.len() < 2 {
        return Err(HarnessError::TooFewPolicies(specs.len()));
    }
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.kind()) {
            return Err(HarnessError::DuplicatePolicy(s.kind().to_string()));
        }
    }
    check_queries(stream, query_ticks)?;
    let entries: Vec<ComparisonEntry> = specs
        .par_iter()
        .map(|spec| ComparisonEntry { spec: spec.clone(), result: run_protocol(stream, spec, protocol, query_ticks) })
        .collect();
    let mut ranking: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].result.is_ok()).collect();
    let recall = |i: usize| entries[i].result.as_ref().map_or(0.0, |r| r.aggregates.mean_recall);
    ranking.sort_by(|&a, &b| recall(b).total_cmp(&recall(a)).then(a.cmp(&b)));
    ranking.extend((0..entries.len()).filter(|&i| entries[i].result.is_err()));
    Ok(Comparison { protocol, entries, ranking })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BankConfig;
    use crate::harness::synth::{gen_synthetic_stream, StreamSpec};
    use crate::policy::PolicyKind;
    use crate::types::FeatureGrid;

    fn stream(base_fps: u32, duration_s: u64) -> Stream {
        gen_synthetic_stream(&StreamSpec {
            seed: 5,
            base_fps,
            duration_s,
            height: 16,
            width: 16,
            depth: 4,
            scene_count: 4,
            noise_sigma: 0.05,
        })
        .unwrap()
    }

    fn none_spec() -> PolicySpec {
        PolicySpec::matched(PolicyKind::NoCompression, &BankConfig::online(4))
    }

    #[test]
    fn resample_8_to_2_fps_takes_every_fourth_tick() {
        let s = stream(8, 10);
        let r = resample(&s, 2).unwrap();
        assert_eq!(r.len(), 20);
        assert!(r.iter().enumerate().all(|(j, x)| x.instant == j as u64 && x.frame_index == 4 * j));
    }

    #[test]
    fn resample_breaks_ties_toward_earlier() {
        // 3 fps -> 2 fps: instant 1 sits at tick 1.5
        let s = stream(3, 4);
        let picks: Vec<usize> = resample(&s, 2).unwrap().iter().map(|r| r.frame_index).collect();
        assert_eq!(picks, vec![0, 1, 3, 4, 6, 7, 9, 10]);
        // upsampling never repeats a frame
        let s = stream(1, 4);
        let picks: Vec<usize> = resample(&s, 2).unwrap().iter().map(|r| r.frame_index).collect();
        assert_eq!(picks, vec![0, 1, 2, 3]);
        assert_eq!(resample(&s, 0), Err(HarnessError::ZeroProtocolFps));
    }

    #[test]
    fn streaming_offers_two_frames_per_second() {
        let s = stream(2, 120);
        let report = run_streaming_protocol(&s, &none_spec(), 2, &[0, 20, 200, 240]).unwrap();
        let offered: Vec<u64> = report.queries.iter().map(|q| q.frames_offered).collect();
        assert_eq!(offered, vec![0, 20, 200, 240]);
        assert_eq!(report.queries[0].scene_recall, 0.0);
        assert_eq!(report.queries[0].frames_in_readout, 0);
        assert!(report.queries.iter().all(|q| q.frames_in_readout == q.frames_offered));
        assert!(report.queries[1..].iter().all(|q| q.scene_recall == 1.0));
    }

    #[test]
    fn off_grid_queries_floor() {
        let s = stream(8, 20);
        // t = 0.125 s, 0.5 s, 0.625 s, 1.375 s
        let r = run_streaming_protocol(&s, &none_spec(), 2, &[1, 4, 5, 11]).unwrap();
        let offered: Vec<u64> = r.queries.iter().map(|q| q.frames_offered).collect();
        assert_eq!(offered, vec![0, 1, 1, 2]);
        // t = 40.125 s with a 32 s window
        let s = stream(8, 60);
        let r = run_sliding_window_protocol(&s, &none_spec(), 32, 2, &[321]).unwrap();
        assert_eq!(r.queries[0].frames_offered, 64);
    }

    #[test]
    fn sliding_window_is_clamped() {
        let s = stream(8, 120);
        // t = 100 s and t = 10 s
        let r = run_sliding_window_protocol(&s, &none_spec(), 32, 2, &[80, 800]).unwrap();
        assert_eq!(r.queries[0].frames_offered, 20);
        assert_eq!(r.queries[1].frames_offered, 64);
    }

    #[test]
    fn query_validation() {
        let s = stream(2, 10);
        assert_eq!(
            run_streaming_protocol(&s, &none_spec(), 2, &[21]).unwrap_err(),
            HarnessError::QueryOutOfRange { tick: 21, max: 20 }
        );
        assert_eq!(run_streaming_protocol(&s, &none_spec(), 2, &[4, 2]).unwrap_err(), HarnessError::QueriesNotSorted);
        assert!(run_streaming_protocol(&s, &none_spec(), 2, &[20]).is_ok());
    }

    #[test]
    fn recall_counts_elapsed_scenes() {
        let scenes: Vec<SceneAnnotation> = (0..4)
            .map(|j| SceneAnnotation { scene_id: j, start_tick: j as u64 * 10, end_tick: (j as u64 + 1) * 10, archetype: vec![] })
            .collect();
        let f = |t: u64| Frame::sampled(Timestamp::new(t, 1), FeatureGrid::filled(1, 1, 1, 1.0).unwrap(), 1);
        assert_eq!(scene_recall(&[f(1), f(12), f(25)], &scenes, 40), 0.75);
        assert_eq!(scene_recall(&[], &scenes, 40), 0.0);
        assert_eq!(scene_recall(&[f(1)], &scenes, 5), 1.0);
        assert_eq!(scene_recall(&[f(1)], &scenes, 0), 0.0);
        assert_eq!(temporal_coverage(&[f(10), f(30)], 40), 0.75);
        assert_eq!(temporal_coverage(&[], 40), 0.0);
    }

    #[test]
    fn comparison_rejects_bad_lists() {
        let s = stream(2, 10);
        let cfg = BankConfig::online(4);
        let one = [PolicySpec::matched(PolicyKind::Fifo, &cfg)];
        assert_eq!(compare_policies(&s, &one, Protocol::streaming(), &[]).unwrap_err(), HarnessError::TooFewPolicies(1));
        let dup = [PolicySpec::matched(PolicyKind::Fifo, &cfg), PolicySpec::with_capacity(PolicyKind::Fifo, &cfg, 5)];
        assert_eq!(
            compare_policies(&s, &dup, Protocol::streaming(), &[]).unwrap_err(),
            HarnessError::DuplicatePolicy("fifo".into())
        );
    }

    #[test]
    fn failures_are_isolated() {
        let s = stream(2, 10);
        let cfg = BankConfig::online(4);
        // 16x16x4 stream at 2 fps does not match the 8 fps pyramid
        let specs = [PolicySpec::matched(PolicyKind::Pyramid, &cfg), PolicySpec::matched(PolicyKind::Fifo, &cfg)];
        let c = compare_policies(&s, &specs, Protocol::streaming(), &[10, 20]).unwrap();
        assert!(c.entries[0].result.is_err());
        assert!(c.entries[1].result.is_ok());
        assert_eq!(c.ranking, vec![1, 0]);
        assert_eq!(c.failures().count(), 1);
    }
}
