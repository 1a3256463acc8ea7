//! `pmb` command line: `gen-stream`, `simulate`, `compare`, `inspect`.
//!
//! Exit codes: 0 ok, 2 usage or config error, 3 I/O or corrupt file,
//! 4 protocol violation (for example a query outside the stream).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{BankConfig, ConfigMap};
use crate::harness::protocol::{compare_policies, run_protocol, Protocol};
use crate::harness::report::{comparison_csv, parse_jsonl, run_csv, timing_json, ReportContext, RunReport};
use crate::harness::streamfile::{self, load_stream, save_stream, write_atomic, StreamFileError};
use crate::harness::synth::{gen_synthetic_stream, StreamSpec};
use crate::harness::{HarnessError, Stream};
use crate::policy::{PolicyKind, PolicySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PROTOCOL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pmb", version, about = "Pyramid memory bank stream simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene stream.
    GenStream(GenStreamArgs),
    /// Run one policy over a stream under an evaluation protocol.
    Simulate(SimulateArgs),
    /// Run several policies over the same stream and rank them.
    Compare(CompareArgs),
    /// Print a stream file header or a report's aggregates.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenStreamArgs {
    /// Generator seed.
    #[arg(long, env = "PMB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of scene segments.
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    /// Stream length in whole seconds (`40` or `40s`).
    #[arg(long, value_parser = parse_whole_seconds)]
    pub duration: u64,
    /// Stream frame rate.
    #[arg(long, default_value_t = 8)]
    pub fps: u32,
    /// Grid shape as HxWxD.
    #[arg(long, default_value = "16x16x8")]
    pub dims: String,
    /// Standard deviation of per-frame Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f32,
    /// Output stream file.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Streaming,
    Sliding,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Stream file written by gen-stream.
    #[arg(short = 's', long = "stream")]
    pub stream: PathBuf,
    /// Bank config file.
    #[arg(short = 'c', long = "config", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config (`online` or `offline`) used instead of a file.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Config override `key=value`; may repeat and wins over file values.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "streaming")]
    pub protocol: ProtocolArg,
    /// Query period (`10s`, `0.5s`); queries run at every multiple up to the stream end.
    #[arg(long = "query-every", value_parser = parse_seconds, conflicts_with = "query_ticks")]
    pub query_every: Option<f64>,
    /// Explicit comma-separated query ticks.
    #[arg(long = "query-ticks", value_delimiter = ',')]
    pub query_ticks: Option<Vec<u64>>,
    /// Sliding-window length in seconds.
    #[arg(long, default_value_t = Protocol::DEFAULT_WINDOW_S)]
    pub window: u32,
    /// Protocol sampling rate.
    #[arg(long, default_value_t = Protocol::DEFAULT_FPS)]
    pub fps: u32,
    /// Frame capacity for the baselines instead of the budget-matched one.
    #[arg(long, conflicts_with = "matched_budget")]
    pub capacity: Option<usize>,
    /// Size baselines to the pyramid's token budget (the default).
    #[arg(long)]
    pub matched_budget: bool,
    /// Seed echoed into reports.
    #[arg(long, env = "PMB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory for reports.
    #[arg(short = 'o', long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Policy name: pyramid, fifo, token-merge, uniform or none.
    #[arg(long)]
    pub policy: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub policies: Vec<String>,
    /// Worker threads for running policies in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn parse_seconds(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().trim_end_matches('s').parse().map_err(|_| format!("`{s}` is not a duration in seconds"))?;
    if !v.is_finite() || v <= 0.0 {
        return Err(format!("`{s}` must be a positive duration"));
    }
    Ok(v)
}

fn parse_whole_seconds(s: &str) -> Result<u64, String> {
    let v = parse_seconds(s)?;
    if v.fract() != 0.0 {
        return Err(format!("`{s}` must be a whole number of seconds"));
    }
    Ok(v as u64)
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split('x').collect();
    let [h, w, d] = parts.as_slice() else {
        return Err(format!("dims `{s}` must look like HxWxD"));
    };
    let p = |v: &str| v.parse::<usize>().map_err(|_| format!("dims `{s}` must be integers"));
    Ok((p(h)?, p(w)?, p(d)?))
}

/// Failure carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::InvalidSpec(_)
            | HarnessError::TooFewPolicies(_)
            | HarnessError::DuplicatePolicy(_)
            | HarnessError::ZeroProtocolFps => EXIT_USAGE,
            _ => EXIT_PROTOCOL,
        };
        Self { code, message: e.to_string() }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenStream(a) => cmd_gen_stream(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn cmd_gen_stream(a: &GenStreamArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let (height, width, depth) = parse_dims(&a.dims).map_err(Failure::usage)?;
    let spec = StreamSpec {
        seed: a.seed,
        base_fps: a.fps,
        duration_s: a.duration,
        height,
        width,
        depth,
        scene_count: a.scenes,
        noise_sigma: a.noise,
    };
    let stream = gen_synthetic_stream(&spec)?;
    let bytes = save_stream(&a.out, &stream).map_err(|e| Failure::io(format!("{}: {e}", a.out.display())))?;
    let sidecar = sidecar_path(&a.out);
    let summary = serde_json::json!({ "spec": spec, "stream": stream.info() });
    write_atomic(&sidecar, serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())
        .map_err(|e| Failure::io(format!("{}: {e}", sidecar.display())))?;
    let _ = writeln!(out, "wrote {} frames, {} bytes to {}", stream.frames.len(), bytes, a.out.display());
    Ok(())
}

/// `s.pmbs` -> `s.pmbs.scenes.json`
pub fn sidecar_path(stream_path: &Path) -> PathBuf {
    let mut name = stream_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".scenes.json");
    stream_path.with_file_name(name)
}

fn load_config(a: &RunArgs, depth: usize) -> Result<BankConfig, Failure> {
    let mut map = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            ConfigMap::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => {
            let cfg = BankConfig::from_preset(name, depth)
                .ok_or_else(|| Failure::usage(format!("unknown preset `{name}` (expected online or offline)")))?;
            ConfigMap::from_config(&cfg)
        }
        (None, None) => return Err(Failure::usage("either --config or --preset is required")),
    };
    for o in &a.overrides {
        map.apply_override(o).map_err(|e| Failure::usage(e.to_string()))?;
    }
    let cfg = map.build().map_err(|e| Failure::usage(e.to_string()))?;
    let report = cfg.validate();
    if !report.ok {
        return Err(Failure::usage(report.to_string()));
    }
    Ok(cfg)
}

fn check_compatible(cfg: &BankConfig, stream: &Stream) -> Result<(), Failure> {
    let first = cfg.layer(1);
    if cfg.base_fps != stream.base_fps {
        return Err(Failure::usage(format!(
            "config base_fps {} does not match the stream's {} fps",
            cfg.base_fps, stream.base_fps
        )));
    }
    if (first.res_h, first.res_w, cfg.depth) != (stream.height, stream.width, stream.depth) {
        return Err(Failure::usage(format!(
            "config layer-1 grid {}x{}x{} does not match the stream's {}x{}x{}",
            first.res_h, first.res_w, cfg.depth, stream.height, stream.width, stream.depth
        )));
    }
    Ok(())
}

fn query_ticks(a: &RunArgs, stream: &Stream) -> Result<Vec<u64>, Failure> {
    if let Some(t) = &a.query_ticks {
        return Ok(t.clone());
    }
    let every = a.query_every.unwrap_or(10.0);
    let step = every * stream.base_fps as f64;
    if step.fract() != 0.0 || step < 1.0 {
        return Err(Failure::usage(format!(
            "query period {every}s is not a whole number of {} fps ticks",
            stream.base_fps
        )));
    }
    let step = step as u64;
    Ok((1..).map(|k| k * step).take_while(|&t| t <= stream.end_tick()).collect())
}

fn protocol(a: &RunArgs) -> Protocol {
    match a.protocol {
        ProtocolArg::Streaming => Protocol::Streaming { fps: a.fps },
        ProtocolArg::Sliding => Protocol::SlidingWindow { window_s: a.window, fps: a.fps },
    }
}

struct Prepared {
    stream: Stream,
    config: BankConfig,
    protocol: Protocol,
    queries: Vec<u64>,
}

fn prepare(a: &RunArgs) -> Result<Prepared, Failure> {
    let stream = load_stream(&a.stream).map_err(|e| Failure::io(format!("{}: {e}", a.stream.display())))?;
    let config = load_config(a, stream.depth)?;
    check_compatible(&config, &stream)?;
    let queries = query_ticks(a, &stream)?;
    Ok(Prepared { stream, config, protocol: protocol(a), queries })
}

fn policy_spec(kind: PolicyKind, a: &RunArgs, cfg: &BankConfig) -> PolicySpec {
    match a.capacity {
        Some(c) => PolicySpec::with_capacity(kind, cfg, c),
        None => PolicySpec::matched(kind, cfg),
    }
}

fn parse_policy(name: &str) -> Result<PolicyKind, Failure> {
    name.trim().parse().map_err(|e: crate::policy::PolicyError| Failure::usage(e.to_string()))
}

fn context(a: &RunArgs, p: &Prepared) -> ReportContext {
    ReportContext {
        tool: format!("pmb {}", env!("CARGO_PKG_VERSION")),
        seed: a.seed,
        stream: p.stream.info(),
        config: p.config.clone(),
        protocol: p.protocol,
        query_ticks: p.queries.clone(),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes()).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn print_run(out: &mut dyn Write, r: &RunReport) {
    let _ = writeln!(
        out,
        "{:<12} budget {:>10}  peak tokens {:>8}  mean recall {:.4}  frames {}",
        r.policy.as_str(),
        r.budget.map_or_else(|| "unbounded".to_string(), |b| b.to_string()),
        r.aggregates.peak_tokens,
        r.aggregates.mean_recall,
        r.aggregates.frames_ingested,
    );
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let kind = parse_policy(&a.policy)?;
    let p = prepare(&a.run)?;
    let spec = policy_spec(kind, &a.run, &p.config);
    spec.build().map_err(|e| Failure::usage(e.to_string()))?;
    let report = run_protocol(&p.stream, &spec, p.protocol, &p.queries)?;
    ensure_dir(&a.run.out_dir)?;
    write_file(&a.run.out_dir, &format!("{kind}.jsonl"), &report.to_jsonl(&context(&a.run, &p)))?;
    write_file(&a.run.out_dir, "summary.csv", &run_csv(&report))?;
    write_file(&a.run.out_dir, "timing.json", &timing_json([&report]))?;
    print_run(out, &report);
    Ok(())
}

fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let kinds = a.policies.iter().map(|n| parse_policy(n)).collect::<Result<Vec<_>, _>>()?;
    let p = prepare(&a.run)?;
    let specs: Vec<PolicySpec> = kinds.iter().map(|&k| policy_spec(k, &a.run, &p.config)).collect();
    for s in &specs {
        s.build().map_err(|e| Failure::usage(e.to_string()))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let comparison = pool.install(|| compare_policies(&p.stream, &specs, p.protocol, &p.queries))?;

    ensure_dir(&a.run.out_dir)?;
    let ctx = context(&a.run, &p);
    for e in &comparison.entries {
        if let Ok(r) = &e.result {
            write_file(&a.run.out_dir, &format!("{}.jsonl", r.policy), &r.to_jsonl(&ctx))?;
        }
    }
    write_file(&a.run.out_dir, "summary.csv", &comparison_csv(&comparison))?;
    let ok = comparison.entries.iter().filter_map(|e| e.result.as_ref().ok());
    write_file(&a.run.out_dir, "timing.json", &timing_json(ok))?;

    for &i in &comparison.ranking {
        match &comparison.entries[i].result {
            Ok(r) => print_run(out, r),
            Err(e) => {
                let _ = writeln!(out, "{:<12} failed: {e}", comparison.entries[i].spec.kind().as_str());
            }
        }
    }
    if let Some(failed) = comparison.failures().next() {
        let e = failed.result.as_ref().unwrap_err();
        return Err(Failure { code: EXIT_PROTOCOL, message: format!("policy {} failed: {e}", failed.spec.kind()) });
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let bytes = fs::read(&a.path).map_err(|e| Failure::io(format!("{}: {e}", a.path.display())))?;
    if bytes.first() == Some(&b'{') {
        let text = String::from_utf8(bytes).map_err(|e| Failure::io(e.to_string()))?;
        let r = parse_jsonl(&text).map_err(|e| Failure::io(format!("{}: {e}", a.path.display())))?;
        let _ = writeln!(out, "report: policy {}", r.policy);
        let _ = writeln!(out, "budget: {}", r.budget.map_or_else(|| "unbounded".to_string(), |b| b.to_string()));
        let _ = writeln!(out, "queries: {}", r.query_count);
        let _ = writeln!(out, "mean recall: {:.4}", r.aggregates.mean_recall);
        let _ = writeln!(out, "peak tokens: {}", r.aggregates.peak_tokens);
        let _ = writeln!(out, "frames ingested: {}", r.aggregates.frames_ingested);
        let _ = writeln!(
            out,
            "tokens appended/erased: {}/{}",
            r.aggregates.tokens_appended, r.aggregates.tokens_erased
        );
        return Ok(());
    }
    let stream = streamfile::decode_stream(&bytes).map_err(|e| {
        let kind = match &e {
            StreamFileError::BadMagic { .. } => "BadMagic",
            StreamFileError::VersionMismatch { .. } => "VersionMismatch",
            StreamFileError::TruncatedFile { .. } => "TruncatedFile",
            StreamFileError::Corrupt { .. } => "Corrupt",
            StreamFileError::Io(_) => "IoError",
        };
        Failure::io(format!("{}: {kind}: {e}", a.path.display()))
    })?;
    let info = stream.info();
    let _ = writeln!(out, "stream: {} bytes", bytes.len());
    let _ = writeln!(out, "base_fps: {}", info.base_fps);
    let _ = writeln!(out, "dims: {}x{}x{}", info.height, info.width, info.depth);
    let _ = writeln!(out, "frames: {}", info.frame_count);
    let _ = writeln!(out, "scenes: {}", info.scenes.len());
    for (id, start, end) in &info.scenes {
        let _ = writeln!(out, "  scene {id}: ticks [{start}, {end})");
    }
    Ok(())
}
