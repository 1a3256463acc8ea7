//! Python bindings for the pyramid memory bank: configs, the bank, pooling
//! kernels, the KV cache model, synthetic streams, policies and protocols.
//!
//! Grids cross the boundary as nested `[height][width][depth]` float lists.

use std::path::PathBuf;
use std::sync::Mutex;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pyramid_memory::config::ConfigMap;
use pyramid_memory::harness::streamfile::{self, StreamFileError};
use pyramid_memory::harness::{self, Protocol, RunReport, StreamSpec};
use pyramid_memory::kvcache::CacheEntry;
use pyramid_memory::{
    kernels, BankConfig, CacheState, FeatureGrid, Frame, FrameOrigin, MemoryPolicy, PolicyKind, PolicySpec,
    PyramidMemoryBank, SyncEvent, Timestamp, ValidationReport,
};

type Nested = Vec<Vec<Vec<f32>>>;

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn file_error(e: StreamFileError) -> PyErr {
    match e {
        StreamFileError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Flattens a `[h][w][d]` nested list into a grid, rejecting ragged input.
pub fn grid_from_nested(rows: Nested) -> Result<FeatureGrid, String> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let d = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(h * w * d);
    for (y, row) in rows.into_iter().enumerate() {
        if row.len() != w {
            return Err(format!("row {y} has {} cells, expected {w}", row.len()));
        }
        for (x, cell) in row.into_iter().enumerate() {
            if cell.len() != d {
                return Err(format!("cell ({y}, {x}) has {} channels, expected {d}", cell.len()));
            }
            data.extend(cell);
        }
    }
    FeatureGrid::new(h, w, d, data).map_err(|e| e.to_string())
}

pub fn grid_to_nested(grid: &FeatureGrid) -> Nested {
    let d = grid.depth();
    grid.data().chunks(grid.width() * d).map(|row| row.chunks(d).map(<[f32]>::to_vec).collect()).collect()
}

fn to_grid(rows: Nested) -> PyResult<FeatureGrid> {
    grid_from_nested(rows).map_err(PyValueError::new_err)
}

fn report_dict<'py>(py: Python<'py>, r: &ValidationReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ok", r.ok)?;
    d.set_item("total_budget", r.total_budget)?;
    d.set_item("layer_budgets", r.layer_budgets.clone())?;
    d.set_item("violations", r.violations.iter().map(ToString::to_string).collect::<Vec<_>>())?;
    Ok(d)
}

/// Layered bank configuration.
#[pyclass(name = "BankConfig", frozen)]
pub struct PyBankConfig {
    inner: BankConfig,
}

#[pymethods]
impl PyBankConfig {
    /// 2/2/12 frames at 16x16, 8x8, 4x4 sampled at 1/2/8 fps (832 tokens).
    #[staticmethod]
    #[pyo3(signature = (depth = 8))]
    fn online(depth: usize) -> Self {
        Self { inner: BankConfig::online(depth) }
    }

    /// 24/24/144 frames on the same pyramid (9984 tokens).
    #[staticmethod]
    #[pyo3(signature = (depth = 8))]
    fn offline(depth: usize) -> Self {
        Self { inner: BankConfig::offline(depth) }
    }

    /// Parses config text, applying `key=value` overrides on top.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn parse(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let mut map = ConfigMap::parse(text).map_err(value_error)?;
        for o in &overrides {
            map.apply_override(o).map_err(value_error)?;
        }
        Ok(Self { inner: map.build().map_err(value_error)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn from_file(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Copy with one `key=value` override applied.
    fn with_override(&self, assignment: &str) -> PyResult<Self> {
        let mut map = ConfigMap::from_config(&self.inner);
        map.apply_override(assignment).map_err(value_error)?;
        Ok(Self { inner: map.build().map_err(value_error)? })
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.inner.validate())
    }

    fn token_budget(&self) -> u64 {
        self.inner.token_budget()
    }

    fn to_text(&self) -> String {
        self.inner.to_config_text()
    }

    #[getter]
    fn base_fps(&self) -> u32 {
        self.inner.base_fps
    }

    #[getter]
    fn beta(&self) -> usize {
        self.inner.beta
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    /// `(rate_fps, capacity, res_h, res_w)` per layer, shallowest first.
    #[getter]
    fn layers(&self) -> Vec<(u32, usize, usize, usize)> {
        self.inner.layers.iter().map(|l| (l.rate_fps, l.capacity, l.res_h, l.res_w)).collect()
    }

    fn __repr__(&self) -> String {
        format!("BankConfig(layers={:?}, base_fps={}, depth={})", self.layers(), self.inner.base_fps, self.inner.depth)
    }
}

#[pyfunction]
fn validate_config<'py>(py: Python<'py>, config: PyRef<'py, PyBankConfig>) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &config.inner.validate())
}

/// Cache erasure boundary produced by one eviction.
#[pyclass(name = "SyncEvent", frozen)]
pub struct PySyncEvent {
    inner: SyncEvent,
}

#[pymethods]
impl PySyncEvent {
    #[getter]
    fn t_min_tick(&self) -> u64 {
        self.inner.t_min.tick
    }

    #[getter]
    fn t_min_seconds(&self) -> f64 {
        self.inner.t_min.seconds()
    }

    #[getter]
    fn evicted_from_layer(&self) -> usize {
        self.inner.evicted_from_layer
    }

    #[getter]
    fn cascade_depth(&self) -> usize {
        self.inner.cascade_depth
    }

    fn __repr__(&self) -> String {
        format!(
            "SyncEvent(t_min_tick={}, evicted_from_layer={}, cascade_depth={})",
            self.inner.t_min.tick, self.inner.evicted_from_layer, self.inner.cascade_depth
        )
    }
}

fn events(list: Vec<SyncEvent>) -> Vec<PySyncEvent> {
    list.into_iter().map(|inner| PySyncEvent { inner }).collect()
}

/// A stored frame.
#[pyclass(name = "Frame", frozen)]
pub struct PyFrame {
    inner: Frame,
}

#[pymethods]
impl PyFrame {
    #[getter]
    fn tick(&self) -> u64 {
        self.inner.ts.tick
    }

    #[getter]
    fn seconds(&self) -> f64 {
        self.inner.ts.seconds()
    }

    #[getter]
    fn layer(&self) -> usize {
        self.inner.layer
    }

    /// `"sampled"`, `"down-written"` or `"merged"`.
    #[getter]
    fn origin(&self) -> &'static str {
        match self.inner.origin {
            FrameOrigin::StreamSampled => "sampled",
            FrameOrigin::DownWritten => "down-written",
            FrameOrigin::Merged => "merged",
        }
    }

    #[getter]
    fn revision(&self) -> u32 {
        self.inner.revision
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.grid.height(), self.inner.grid.width(), self.inner.grid.depth())
    }

    #[getter]
    fn token_count(&self) -> u64 {
        self.inner.token_count()
    }

    fn grid(&self) -> Nested {
        grid_to_nested(&self.inner.grid)
    }

    fn __repr__(&self) -> String {
        format!("Frame(tick={}, layer={}, shape={:?}, origin={})", self.tick(), self.layer(), self.shape(), self.origin())
    }
}

fn frames(list: Vec<Frame>) -> Vec<PyFrame> {
    list.into_iter().map(|inner| PyFrame { inner }).collect()
}

#[pyclass(name = "PyramidMemoryBank")]
pub struct PyBank {
    inner: PyramidMemoryBank,
}

#[pymethods]
impl PyBank {
    #[new]
    fn new(config: PyRef<'_, PyBankConfig>) -> PyResult<Self> {
        Ok(Self { inner: PyramidMemoryBank::new(config.inner.clone()).map_err(value_error)? })
    }

    /// Offers the frame at `tick` (in base-rate ticks); returns the evictions it caused.
    fn ingest(&mut self, tick: u64, grid: Nested) -> PyResult<Vec<PySyncEvent>> {
        let ts = Timestamp::new(tick, self.inner.config().base_fps);
        Ok(events(self.inner.ingest(ts, to_grid(grid)?).map_err(value_error)?))
    }

    fn readout(&self) -> Vec<PyFrame> {
        frames(self.inner.readout())
    }

    /// Ticks stored in layer `index` (1-based).
    fn layer_ticks(&self, index: usize) -> PyResult<Vec<u64>> {
        if index == 0 || index > self.inner.layers().len() {
            return Err(PyValueError::new_err(format!("no layer {index}")));
        }
        Ok(self.inner.layer(index).frames().iter().map(|f| f.ts.tick).collect())
    }

    fn token_count(&self) -> u64 {
        self.inner.token_count()
    }

    fn budget(&self) -> u64 {
        self.inner.budget()
    }

    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn ingest_count(&self) -> u64 {
        self.inner.ingest_count()
    }

    fn dropped_count(&self) -> u64 {
        self.inner.dropped_count()
    }

    fn sync_log(&self) -> Vec<PySyncEvent> {
        events(self.inner.sync_log().to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.frame_count()
    }
}

#[pyfunction]
fn avg_pool2d(grid: Nested, out_h: usize, out_w: usize) -> PyResult<Nested> {
    Ok(grid_to_nested(&kernels::avg_pool2d(&to_grid(grid)?, out_h, out_w).map_err(value_error)?))
}

#[pyfunction]
fn global_avg_pool(grid: Nested) -> PyResult<Vec<f32>> {
    Ok(kernels::global_avg_pool(&to_grid(grid)?).values().to_vec())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    kernels::cosine_similarity(&kernels::PooledVector::new(a), &kernels::PooledVector::new(b)).map_err(value_error)
}

/// Cosine of the two grids' channel means.
#[pyfunction]
fn pooled_pair_similarity(a: Nested, b: Nested) -> PyResult<f64> {
    kernels::pooled_pair_similarity(&to_grid(a)?, &to_grid(b)?).map_err(value_error)
}

/// Any memory policy by name: `pyramid`, `fifo`, `token-merge`, `uniform` or `none`.
#[pyclass(name = "Policy")]
pub struct PyPolicy {
    inner: Mutex<Box<dyn MemoryPolicy>>,
    base_fps: u32,
}

impl PyPolicy {
    fn with<R>(&self, f: impl FnOnce(&mut dyn MemoryPolicy) -> R) -> R {
        let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        f(guard.as_mut())
    }
}

fn policy_spec(name: &str, config: &BankConfig, capacity: Option<usize>) -> PyResult<PolicySpec> {
    let kind: PolicyKind = name.parse().map_err(value_error)?;
    Ok(match capacity {
        Some(c) => PolicySpec::with_capacity(kind, config, c),
        None => PolicySpec::matched(kind, config),
    })
}

#[pymethods]
impl PyPolicy {
    /// Baselines default to the frame capacity matching the config's token budget.
    #[new]
    #[pyo3(signature = (name, config, capacity = None))]
    fn new(name: &str, config: PyRef<'_, PyBankConfig>, capacity: Option<usize>) -> PyResult<Self> {
        let spec = policy_spec(name, &config.inner, capacity)?;
        Ok(Self { inner: Mutex::new(spec.build().map_err(value_error)?), base_fps: config.inner.base_fps })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.with(|p| p.kind().as_str())
    }

    fn ingest(&self, tick: u64, grid: Nested) -> PyResult<Vec<PySyncEvent>> {
        let grid = to_grid(grid)?;
        let ts = Timestamp::new(tick, self.base_fps);
        Ok(events(self.with(|p| p.ingest(ts, grid)).map_err(value_error)?))
    }

    fn readout(&self) -> Vec<PyFrame> {
        frames(self.with(|p| p.readout()))
    }

    fn readout_ticks(&self) -> Vec<u64> {
        self.with(|p| p.readout_entries().iter().map(|e| e.ts.tick).collect())
    }

    fn token_count(&self) -> u64 {
        self.with(|p| p.token_count())
    }

    /// Token ceiling, `None` when unbounded.
    fn budget(&self) -> Option<u64> {
        self.with(|p| p.budget())
    }

    fn simulator_only(&self) -> bool {
        self.with(|p| p.simulator_only())
    }
}

fn readout_entries(source: &Bound<'_, PyAny>) -> PyResult<Vec<CacheEntry>> {
    if let Ok(bank) = source.cast::<PyBank>() {
        return Ok(bank.borrow().inner.readout_entries());
    }
    if let Ok(policy) = source.cast::<PyPolicy>() {
        return Ok(policy.borrow().with(|p| p.readout_entries()));
    }
    Err(PyValueError::new_err("expected a PyramidMemoryBank or a Policy"))
}

/// Metadata model of a prefix KV cache kept in step with a bank or policy.
#[pyclass(name = "CacheState")]
#[derive(Default)]
pub struct PyCacheState {
    inner: CacheState,
}

#[pymethods]
impl PyCacheState {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Erases entries at or after the event's boundary; returns tokens erased.
    fn sync(&mut self, event: PyRef<'_, PySyncEvent>) -> u64 {
        self.inner.sync_on_eviction(&event.inner)
    }

    /// Appends whatever the source's readout holds beyond the cache; returns tokens appended.
    fn catch_up(&mut self, source: &Bound<'_, PyAny>) -> PyResult<u64> {
        Ok(self.inner.catch_up(&readout_entries(source)?))
    }

    /// Whether the cache is an exact prefix of the source's readout.
    fn is_consistent(&self, source: &Bound<'_, PyAny>) -> PyResult<bool> {
        Ok(self.inner.consistency_check_entries(&readout_entries(source)?).consistent)
    }

    /// `(tick, token_count, revision)` per entry.
    fn entries(&self) -> Vec<(u64, u64, u32)> {
        self.inner.entries().iter().map(|e| (e.ts.tick, e.token_count, e.revision)).collect()
    }

    fn token_count(&self) -> u64 {
        self.inner.token_count()
    }

    #[getter]
    fn tokens_appended(&self) -> u64 {
        self.inner.tokens_appended_total()
    }

    #[getter]
    fn tokens_erased(&self) -> u64 {
        self.inner.tokens_erased_total()
    }

    #[getter]
    fn repairs(&self) -> u64 {
        self.inner.repairs()
    }

    /// Share of re-encoding avoided, `None` before any catch-up.
    fn recompute_savings(&self) -> Option<f64> {
        self.inner.recompute_savings().ok()
    }
}

/// Synthetic scene stream.
#[pyclass(name = "Stream", frozen)]
pub struct PyStream {
    inner: harness::Stream,
}

#[pymethods]
impl PyStream {
    #[staticmethod]
    #[pyo3(signature = (seed, duration_s, scene_count, height = 16, width = 16, depth = 8, base_fps = 8, noise_sigma = 0.1))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        seed: u64,
        duration_s: u64,
        scene_count: usize,
        height: usize,
        width: usize,
        depth: usize,
        base_fps: u32,
        noise_sigma: f32,
    ) -> PyResult<Self> {
        let spec = StreamSpec { seed, base_fps, duration_s, height, width, depth, scene_count, noise_sigma };
        Ok(Self { inner: harness::gen_synthetic_stream(&spec).map_err(value_error)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: streamfile::load_stream(&path).map_err(file_error)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: streamfile::decode_stream(data).map_err(file_error)? })
    }

    /// Writes the stream file atomically; returns its size in bytes.
    fn save(&self, path: PathBuf) -> PyResult<u64> {
        streamfile::save_stream(&path, &self.inner).map_err(file_error)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &streamfile::encode_stream(&self.inner))
    }

    #[getter]
    fn base_fps(&self) -> u32 {
        self.inner.base_fps
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height, self.inner.width, self.inner.depth)
    }

    /// `(scene_id, start_tick, end_tick)` per scene.
    #[getter]
    fn scenes(&self) -> Vec<(u32, u64, u64)> {
        self.inner.info().scenes
    }

    fn ticks(&self) -> Vec<u64> {
        self.inner.frames.iter().map(|f| f.tick).collect()
    }

    /// `(tick, grid)` of frame `index`.
    fn frame(&self, index: usize) -> PyResult<(u64, Nested)> {
        let f = self.inner.frames.get(index).ok_or_else(|| PyValueError::new_err(format!("no frame {index}")))?;
        Ok((f.tick, grid_to_nested(&f.grid)))
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }

    fn __eq__(&self, other: PyRef<'_, PyStream>) -> bool {
        self.inner == other.inner
    }
}

fn run_dict<'py>(py: Python<'py>, r: &RunReport) -> PyResult<Bound<'py, PyDict>> {
    let a = &r.aggregates;
    let d = PyDict::new(py);
    d.set_item("policy", r.policy.as_str())?;
    d.set_item("budget", r.budget)?;
    d.set_item("simulator_only", r.simulator_only)?;
    d.set_item("mean_recall", a.mean_recall)?;
    d.set_item("mean_coverage", a.mean_coverage)?;
    d.set_item("peak_tokens", a.peak_tokens)?;
    d.set_item("frames_ingested", a.frames_ingested)?;
    d.set_item("tokens_appended", a.tokens_appended)?;
    d.set_item("tokens_erased", a.tokens_erased)?;
    d.set_item("recompute_savings", a.recompute_savings)?;
    d.set_item("sync_events", a.sync_events)?;
    let queries: Vec<(u64, u64, u64, u64, f64, f64)> = r
        .queries
        .iter()
        .map(|q| (q.query_tick, q.frames_offered, q.frames_in_readout, q.token_count, q.scene_recall, q.temporal_coverage))
        .collect();
    d.set_item("queries", queries)?;
    Ok(d)
}

/// Runs one policy over `stream` under the `streaming` or `sliding` protocol.
///
/// The result holds the aggregates plus `queries`, a list of
/// `(tick, frames_offered, frames_in_readout, tokens, scene_recall, temporal_coverage)`.
#[pyfunction]
#[pyo3(signature = (stream, config, policy, query_ticks, protocol = "streaming", fps = 2, window_s = 32, capacity = None))]
#[allow(clippy::too_many_arguments)]
fn run_protocol<'py>(
    py: Python<'py>,
    stream: PyRef<'py, PyStream>,
    config: PyRef<'py, PyBankConfig>,
    policy: &str,
    query_ticks: Vec<u64>,
    protocol: &str,
    fps: u32,
    window_s: u32,
    capacity: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = policy_spec(policy, &config.inner, capacity)?;
    let protocol = match protocol {
        "streaming" => Protocol::Streaming { fps },
        "sliding" => Protocol::SlidingWindow { window_s, fps },
        other => return Err(PyValueError::new_err(format!("unknown protocol `{other}` (expected streaming or sliding)"))),
    };
    let report = harness::run_protocol(&stream.inner, &spec, protocol, &query_ticks).map_err(value_error)?;
    run_dict(py, &report)
}

#[pymodule]
fn pyramid_memory_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBankConfig>()?;
    m.add_class::<PySyncEvent>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyBank>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyCacheState>()?;
    m.add_class::<PyStream>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(avg_pool2d, m)?)?;
    m.add_function(wrap_pyfunction!(global_avg_pool, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_pair_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    Ok(())
}
