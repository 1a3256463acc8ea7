//! Bank configuration, validation and the flat `key = value` config file.
//!
//! A config file looks like
//!
//! ```text
//! base_fps = 8
//! beta = 2
//! depth = 8
//! layer.1.rate_fps = 1
//! layer.1.capacity = 2
//! layer.1.res_h = 16
//! layer.1.res_w = 16
//! ```
//!
//! with one `layer.<i>.*` block per layer. Lines are TOML dotted keys, so
//! `[layer.1]` table syntax is accepted too.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerConfig {
    /// 1-based position in the pyramid.
    pub index: usize,
    pub rate_fps: u32,
    /// Frame capacity.
    pub capacity: usize,
    pub res_h: usize,
    pub res_w: usize,
}

impl LayerConfig {
    pub fn tokens_per_frame(&self) -> u64 {
        (self.res_h * self.res_w) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BankConfig {
    pub layers: Vec<LayerConfig>,
    pub beta: usize,
    pub base_fps: u32,
    pub depth: usize,
}

const ONLINE_CAPACITY: [usize; 3] = [2, 2, 12];
const OFFLINE_CAPACITY: [usize; 3] = [24, 24, 144];
const PRESET_RATES: [u32; 3] = [1, 2, 8];
const PRESET_RES: [usize; 3] = [16, 8, 4];

impl BankConfig {
    fn preset(capacity: [usize; 3], depth: usize) -> Self {
        let layers = (0..3)
            .map(|i| LayerConfig {
                index: i + 1,
                rate_fps: PRESET_RATES[i],
                capacity: capacity[i],
                res_h: PRESET_RES[i],
                res_w: PRESET_RES[i],
            })
            .collect();
        Self { layers, beta: 2, base_fps: 8, depth }
    }

    /// Three layers at 1/2/8 fps holding 2/2/12 frames of 16x16/8x8/4x4 tokens (832 tokens).
    pub fn online(depth: usize) -> Self {
        Self::preset(ONLINE_CAPACITY, depth)
    }

    /// Same pyramid with 24/24/144 frames (9984 tokens).
    pub fn offline(depth: usize) -> Self {
        Self::preset(OFFLINE_CAPACITY, depth)
    }

    pub fn from_preset(name: &str, depth: usize) -> Option<Self> {
        match name {
            "online" => Some(Self::online(depth)),
            "offline" => Some(Self::offline(depth)),
            _ => None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> &LayerConfig {
        &self.layers[index - 1]
    }

    /// `min(r_i, base_fps)`: a layer cannot sample faster than the stream.
    pub fn effective_rate(&self, index: usize) -> u32 {
        self.layer(index).rate_fps.min(self.base_fps)
    }

    /// `Σ C_i · tokens_i`, saturating on overflow (validation reports that case).
    pub fn token_budget(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.capacity as u64).saturating_mul(l.tokens_per_frame()))
            .fold(0u64, u64::saturating_add)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_config(self)
    }

    /// Renders the config in the flat file format; `parse_config` reads it back.
    pub fn to_config_text(&self) -> String {
        let mut out = format!("base_fps = {}\nbeta = {}\ndepth = {}\n", self.base_fps, self.beta, self.depth);
        for l in &self.layers {
            out.push_str(&format!(
                "layer.{i}.rate_fps = {}\nlayer.{i}.capacity = {}\nlayer.{i}.res_h = {}\nlayer.{i}.res_w = {}\n",
                l.rate_fps,
                l.capacity,
                l.res_h,
                l.res_w,
                i = l.index
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoLayers,
    ZeroBaseFps,
    ZeroDepth,
    BetaTooSmall { beta: usize },
    LayerIndex { position: usize, index: usize },
    ZeroRate { layer: usize },
    ZeroCapacity { layer: usize },
    ZeroResolution { layer: usize },
    RatesNotIncreasing { layer: usize, rate: u32, previous: u32 },
    ResolutionNotDecreasing { layer: usize },
    ResolutionNotBetaScaled { layer: usize, expected_h: usize, expected_w: usize },
    RateNotAligned { layer: usize, rate: u32, base_fps: u32 },
    BudgetOverflow,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLayers => write!(f, "config has no layers"),
            Violation::ZeroBaseFps => write!(f, "base_fps must be positive"),
            Violation::ZeroDepth => write!(f, "depth must be positive"),
            Violation::BetaTooSmall { beta } => write!(f, "beta must be at least 2, got {beta}"),
            Violation::LayerIndex { position, index } => {
                write!(f, "layer at position {position} has index {index}, expected {position}")
            }
            Violation::ZeroRate { layer } => write!(f, "layer {layer}: rate_fps must be positive"),
            Violation::ZeroCapacity { layer } => write!(f, "layer {layer}: capacity must be positive"),
            Violation::ZeroResolution { layer } => write!(f, "layer {layer}: resolution must be positive"),
            Violation::RatesNotIncreasing { layer, rate, previous } => write!(
                f,
                "rates not strictly increasing: layer {layer} samples at {rate} fps after {previous} fps"
            ),
            Violation::ResolutionNotDecreasing { layer } => {
                write!(f, "resolutions not strictly decreasing at layer {layer}")
            }
            Violation::ResolutionNotBetaScaled { layer, expected_h, expected_w } => write!(
                f,
                "layer {layer}: resolution must be {expected_h}x{expected_w} (layer 1 scaled down by beta per layer)"
            ),
            Violation::RateNotAligned { layer, rate, base_fps } => write!(
                f,
                "layer {layer}: rate {rate} fps neither divides base_fps {base_fps} nor reaches it"
            ),
            Violation::BudgetOverflow => write!(f, "total token budget overflows 64 bits"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub total_budget: u64,
    pub layer_budgets: Vec<u64>,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            write!(f, "ok, {} tokens ({:?} per layer)", self.total_budget, self.layer_budgets)
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            write!(f, "invalid config: {}", msgs.join("; "))
        }
    }
}

pub fn validate_config(cfg: &BankConfig) -> ValidationReport {
    let mut violations = Vec::new();
    if cfg.layers.is_empty() {
        violations.push(Violation::NoLayers);
    }
    if cfg.base_fps == 0 {
        violations.push(Violation::ZeroBaseFps);
    }
    if cfg.depth == 0 {
        violations.push(Violation::ZeroDepth);
    }
    if cfg.beta < 2 {
        violations.push(Violation::BetaTooSmall { beta: cfg.beta });
    }

    let first = cfg.layers.first();
    for (pos, layer) in cfg.layers.iter().enumerate() {
        let i = pos + 1;
        if layer.index != i {
            violations.push(Violation::LayerIndex { position: i, index: layer.index });
        }
        if layer.rate_fps == 0 {
            violations.push(Violation::ZeroRate { layer: i });
        } else if cfg.base_fps > 0 && layer.rate_fps < cfg.base_fps && !cfg.base_fps.is_multiple_of(layer.rate_fps) {
            violations.push(Violation::RateNotAligned { layer: i, rate: layer.rate_fps, base_fps: cfg.base_fps });
        }
        if layer.capacity == 0 {
            violations.push(Violation::ZeroCapacity { layer: i });
        }
        if layer.res_h == 0 || layer.res_w == 0 {
            violations.push(Violation::ZeroResolution { layer: i });
        }
        if pos > 0 {
            let prev = &cfg.layers[pos - 1];
            if layer.rate_fps <= prev.rate_fps {
                violations.push(Violation::RatesNotIncreasing { layer: i, rate: layer.rate_fps, previous: prev.rate_fps });
            }
            if layer.res_h >= prev.res_h || layer.res_w >= prev.res_w {
                violations.push(Violation::ResolutionNotDecreasing { layer: i });
            }
            if let Some(first) = first {
                if cfg.beta >= 2 {
                    let scale = (cfg.beta as u64).checked_pow(pos as u32);
                    let expected = scale.and_then(|s| {
                        let s = s as usize;
                        (first.res_h % s == 0 && first.res_w % s == 0).then(|| (first.res_h / s, first.res_w / s))
                    });
                    match expected {
                        Some((eh, ew)) if eh == layer.res_h && ew == layer.res_w => {}
                        Some((eh, ew)) => violations.push(Violation::ResolutionNotBetaScaled {
                            layer: i,
                            expected_h: eh,
                            expected_w: ew,
                        }),
                        None => violations.push(Violation::ResolutionNotBetaScaled {
                            layer: i,
                            expected_h: 0,
                            expected_w: 0,
                        }),
                    }
                }
            }
        }
    }

    let mut layer_budgets = Vec::with_capacity(cfg.layers.len());
    let mut total: Option<u64> = Some(0);
    for layer in &cfg.layers {
        let b = (layer.capacity as u64).checked_mul(layer.tokens_per_frame());
        layer_budgets.push(b.unwrap_or(u64::MAX));
        total = total.and_then(|t| b.and_then(|b| t.checked_add(b)));
    }
    if total.is_none() {
        violations.push(Violation::BudgetOverflow);
    }

    ValidationReport {
        ok: violations.is_empty(),
        total_budget: total.unwrap_or(u64::MAX),
        layer_budgets,
        violations,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` must be a non-negative integer, got `{value}`")]
    BadValue { key: String, value: String },
    #[error("layer indices must run 1..=n without gaps, found {0:?}")]
    LayerGap(Vec<usize>),
    #[error("override `{0}` must look like key=value")]
    BadOverride(String),
}

const LAYER_FIELDS: [&str; 4] = ["rate_fps", "capacity", "res_h", "res_w"];

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::Integer(i) => {
                out.insert(key, i.to_string());
            }
            other => {
                return Err(ConfigError::BadValue { key, value: other.to_string() });
            }
        }
    }
    Ok(())
}

/// Flat key/value view of a config file; overrides are applied on top before
/// the typed [`BankConfig`] is built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries)?;
        Ok(Self { entries })
    }

    pub fn from_config(cfg: &BankConfig) -> Self {
        Self::parse(&cfg.to_config_text()).expect("rendered config always parses")
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        if k.trim().is_empty() {
            return Err(ConfigError::BadOverride(spec.to_string()));
        }
        self.set(k, v);
        Ok(())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.entries.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))?;
        raw.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: raw.clone() })
    }

    pub fn build(&self) -> Result<BankConfig, ConfigError> {
        let mut indices = Vec::new();
        for key in self.entries.keys() {
            match key.as_str() {
                "base_fps" | "beta" | "depth" => {}
                _ => {
                    let parts: Vec<&str> = key.split('.').collect();
                    let index = match parts.as_slice() {
                        ["layer", idx, field] if LAYER_FIELDS.contains(field) => idx.parse::<usize>().ok(),
                        _ => None,
                    };
                    match index {
                        Some(i) => {
                            if !indices.contains(&i) {
                                indices.push(i);
                            }
                        }
                        None => return Err(ConfigError::UnknownKey(key.clone())),
                    }
                }
            }
        }
        indices.sort_unstable();
        if indices.iter().enumerate().any(|(pos, &i)| i != pos + 1) {
            return Err(ConfigError::LayerGap(indices));
        }
        let layers = indices
            .iter()
            .map(|&i| {
                Ok(LayerConfig {
                    index: i,
                    rate_fps: self.get(&format!("layer.{i}.rate_fps"))?,
                    capacity: self.get(&format!("layer.{i}.capacity"))?,
                    res_h: self.get(&format!("layer.{i}.res_h"))?,
                    res_w: self.get(&format!("layer.{i}.res_w"))?,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(BankConfig {
            layers,
            beta: self.get("beta")?,
            base_fps: self.get("base_fps")?,
            depth: self.get("depth")?,
        })
    }
}

pub fn parse_config(text: &str) -> Result<BankConfig, ConfigError> {
    ConfigMap::parse(text)?.build()
}
