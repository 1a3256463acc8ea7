//! Run reports: JSON-lines per policy, a CSV summary per comparison, and a
//! separate timing file so that report files are byte-for-byte reproducible.
//!
//! `scene_recall` and `temporal_coverage` are harness-defined retention
//! metrics, not downstream QA accuracy.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::{Comparison, Protocol};
use super::StreamInfo;
use crate::config::BankConfig;
use crate::policy::{PolicyKind, PolicySpec};

pub const METRIC_NOTE: &str = "scene_recall and temporal_coverage are harness-defined retention proxies";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_tick: u64,
    pub frames_offered: u64,
    pub frames_in_readout: u64,
    pub token_count: u64,
    pub scene_recall: f64,
    pub temporal_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_recall: f64,
    pub mean_coverage: f64,
    pub peak_tokens: u64,
    pub frames_ingested: u64,
    pub tokens_appended: u64,
    pub tokens_erased: u64,
    /// `None` when nothing was ever encoded.
    pub recompute_savings: Option<f64>,
    pub sync_events: u64,
    pub cache_repairs: u64,
    pub queries_over_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyKind,
    pub spec: PolicySpec,
    pub protocol: Protocol,
    pub config_digest: String,
    pub budget: Option<u64>,
    pub simulator_only: bool,
    pub queries: Vec<QueryRecord>,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Everything needed to reproduce a run, echoed at the top of each report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub tool: String,
    pub seed: u64,
    pub stream: StreamInfo,
    pub config: BankConfig,
    pub protocol: Protocol,
    pub query_ticks: Vec<u64>,
}

/// Short SHA-256 of the JSON form of `value`.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("report values serialize");
    let hash = Sha256::digest(&json);
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Header {
        context: &'a ReportContext,
        policy: PolicyKind,
        spec: &'a PolicySpec,
        config_digest: &'a str,
        budget: Option<u64>,
        simulator_only: bool,
        note: &'static str,
    },
    Query(&'a QueryRecord),
    Aggregate(&'a Aggregates),
}

impl RunReport {
    pub fn to_jsonl(&self, context: &ReportContext) -> String {
        let mut out = String::new();
        let mut push = |line: Line<'_>| {
            out.push_str(&serde_json::to_string(&line).expect("report lines serialize"));
            out.push('\n');
        };
        push(Line::Header {
            context,
            policy: self.policy,
            spec: &self.spec,
            config_digest: &self.config_digest,
            budget: self.budget,
            simulator_only: self.simulator_only,
            note: METRIC_NOTE,
        });
        for q in &self.queries {
            push(Line::Query(q));
        }
        push(Line::Aggregate(&self.aggregates));
        out
    }
}

/// What `inspect` reads back from a JSON-lines report.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub policy: String,
    pub budget: Option<u64>,
    pub query_count: usize,
    pub aggregates: Aggregates,
}

pub fn parse_jsonl(text: &str) -> Result<ParsedReport, String> {
    let mut policy = None;
    let mut budget = None;
    let mut aggregates = None;
    let mut query_count = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        match v.get("record").and_then(|r| r.as_str()) {
            Some("header") => {
                policy = v.get("policy").and_then(|p| p.as_str()).map(str::to_string);
                budget = v.get("budget").and_then(|b| b.as_u64());
            }
            Some("query") => query_count += 1,
            Some("aggregate") => {
                let mut obj = v.clone();
                obj.as_object_mut().map(|o| o.remove("record"));
                aggregates = Some(serde_json::from_value(obj).map_err(|e| format!("line {}: {e}", n + 1))?);
            }
            _ => return Err(format!("line {}: not a report record", n + 1)),
        }
    }
    Ok(ParsedReport {
        policy: policy.ok_or("report has no header record")?,
        budget,
        query_count,
        aggregates: aggregates.ok_or("report has no aggregate record")?,
    })
}

const CSV_HEADER: &str = "rank,policy,status,budget,simulator_only,mean_recall,mean_coverage,peak_tokens,frames_ingested,tokens_appended,tokens_erased,recompute_savings,config_digest";

fn opt<T: ToString>(v: Option<T>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

fn csv_row(rank: usize, r: &RunReport) -> String {
    let a = &r.aggregates;
    format!(
        "{rank},{},ok,{},{},{},{},{},{},{},{},{},{}",
        r.policy,
        opt(r.budget, "unbounded"),
        r.simulator_only,
        a.mean_recall,
        a.mean_coverage,
        a.peak_tokens,
        a.frames_ingested,
        a.tokens_appended,
        a.tokens_erased,
        opt(a.recompute_savings, ""),
        r.config_digest
    )
}

/// Ranked CSV summary, one row per policy.
pub fn comparison_csv(c: &Comparison) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (pos, &i) in c.ranking.iter().enumerate() {
        let e = &c.entries[i];
        match &e.result {
            Ok(r) => out.push_str(&csv_row(pos + 1, r)),
            Err(err) => out.push_str(&format!(
                "{},{},error: {},,,,,,,,,,",
                pos + 1,
                e.spec.kind(),
                err.to_string().replace(',', ";")
            )),
        }
        out.push('\n');
    }
    out
}

/// Single-run CSV summary.
pub fn run_csv(r: &RunReport) -> String {
    format!("{CSV_HEADER}\n{}\n", csv_row(1, r))
}

#[derive(Debug, Clone, Serialize)]
struct Timing<'a> {
    policy: &'a str,
    wall_time_s: f64,
}

/// Wall-clock section, kept out of the reproducible report files.
pub fn timing_json<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> String {
    let rows: Vec<Timing<'_>> =
        reports.into_iter().map(|r| Timing { policy: r.policy.as_str(), wall_time_s: r.wall_time_s }).collect();
    serde_json::to_string_pretty(&rows).expect("timing serializes")
}
