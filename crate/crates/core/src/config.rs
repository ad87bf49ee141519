//! Declarative network and cascade configuration, the flat `key = value`
//! file format shared by every command, and pure shape arithmetic.
//!
//! Model keys (optionally prefixed with `stage2.` for the second stage):
//!
//! | key                | example            |
//! |--------------------|--------------------|
//! | `levels`           | `3`                |
//! | `channels`         | `8, 16, 32`        |
//! | `factors`          | `1x2x2, 2x2x2`     |
//! | `patch`            | `8x32x32`          |
//! | `in_channels`      | `1`                |
//! | `out_channels`     | `2`                |
//! | `deep_supervision` | `0, 1`             |
//!
//! Cascade keys: `roi_margin`, `roi_jitter`, `roi_min_component`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use crate::error::ConfigError;

const AXES: [&str; 3] = ["depth", "height", "width"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNet3DConfig {
    /// Resolution stages including the bottleneck.
    pub levels: usize,
    pub channels: Vec<usize>,
    /// One triple per transition, `levels - 1` in total.
    pub factors: Vec<[usize; 3]>,
    pub patch: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    /// Decoder levels carrying an output head; level 0 is the final head.
    pub deep_supervision: BTreeSet<usize>,
}

impl UNet3DConfig {
    /// Three-level network on 8x32x32 patches used by tests and the CLI
    /// defaults.
    pub fn toy() -> Self {
        UNet3DConfig {
            levels: 3,
            channels: vec![8, 16, 32],
            factors: vec![[1, 2, 2], [2, 2, 2]],
            patch: [8, 32, 32],
            in_channels: 1,
            out_channels: 2,
            deep_supervision: [0, 1].into(),
        }
    }

    /// Full-size network: six transitions take 16x320x320 to a 4x5x5
    /// bottleneck, halving depth only on the two deepest.
    pub fn full_size() -> Self {
        UNet3DConfig {
            levels: 7,
            channels: vec![32, 64, 128, 256, 320, 320, 320],
            factors: vec![[1, 2, 2], [1, 2, 2], [1, 2, 2], [1, 2, 2], [2, 2, 2], [2, 2, 2]],
            patch: [16, 320, 320],
            in_channels: 1,
            out_channels: 2,
            deep_supervision: (0..6).collect(),
        }
    }

    /// Checks every invariant and returns the shape trace.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>, ConfigError> {
        if self.levels == 0 {
            return Err(ConfigError::Invalid("levels must be >= 1".into()));
        }
        if self.channels.len() != self.levels {
            return Err(ConfigError::Length {
                what: "channels",
                expected: self.levels,
                got: self.channels.len(),
            });
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(ConfigError::Invalid("channel counts must be positive".into()));
        }
        if self.out_channels != 2 {
            return Err(ConfigError::Invalid(format!(
                "out_channels must be 2 (background, lesion), got {}",
                self.out_channels
            )));
        }
        if !self.deep_supervision.contains(&0) {
            return Err(ConfigError::Invalid("deep_supervision must include level 0".into()));
        }
        if let Some(&l) = self.deep_supervision.iter().find(|&&l| l + 1 >= self.levels.max(2)) {
            return Err(ConfigError::Invalid(format!(
                "deep_supervision level {l} is not a decoder level (bottleneck is {})",
                self.levels - 1
            )));
        }
        shape_trace(self)
    }

    /// Spatial shape at the bottleneck.
    pub fn bottleneck(&self) -> Result<[usize; 3], ConfigError> {
        Ok(*self.validate()?.last().expect("levels >= 1"))
    }

    pub fn to_kv(&self, prefix: &str, kv: &mut KvFile) {
        kv.set(format!("{prefix}levels"), self.levels);
        kv.set(format!("{prefix}channels"), join(&self.channels));
        kv.set(
            format!("{prefix}factors"),
            self.factors.iter().map(|f| triple(*f)).collect::<Vec<_>>().join(", "),
        );
        kv.set(format!("{prefix}patch"), triple(self.patch));
        kv.set(format!("{prefix}in_channels"), self.in_channels);
        kv.set(format!("{prefix}out_channels"), self.out_channels);
        kv.set(format!("{prefix}deep_supervision"), join(&self.deep_supervision));
    }

    /// Reads keys under `prefix`, falling back to `base` for absent ones.
    pub fn from_kv(kv: &KvFile, prefix: &str, base: &UNet3DConfig) -> Result<Self, ConfigError> {
        let key = |k: &str| format!("{prefix}{k}");
        let mut cfg = base.clone();
        if let Some(v) = kv.get_parsed::<usize>(&key("levels"))? {
            cfg.levels = v;
        }
        if let Some(v) = kv.raw(&key("channels")) {
            cfg.channels = parse_list(v, &key("channels"))?;
        }
        if let Some(v) = kv.raw(&key("factors")) {
            cfg.factors = if v.trim().is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|s| parse_triple(s, &key("factors"))).collect::<Result<_, _>>()?
            };
        }
        if let Some(v) = kv.raw(&key("patch")) {
            cfg.patch = parse_triple(v, &key("patch"))?;
        }
        if let Some(v) = kv.get_parsed::<usize>(&key("in_channels"))? {
            cfg.in_channels = v;
        }
        if let Some(v) = kv.get_parsed::<usize>(&key("out_channels"))? {
            cfg.out_channels = v;
        }
        if let Some(v) = kv.raw(&key("deep_supervision")) {
            cfg.deep_supervision = parse_list::<usize>(v, &key("deep_supervision"))?.into_iter().collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-level spatial shapes from the input patch down to the bottleneck.
/// Pure arithmetic; fails on the first indivisible extent.
pub fn shape_trace(cfg: &UNet3DConfig) -> Result<Vec<[usize; 3]>, ConfigError> {
    if cfg.factors.len() + 1 != cfg.levels {
        return Err(ConfigError::Length {
            what: "factors",
            expected: cfg.levels.saturating_sub(1),
            got: cfg.factors.len(),
        });
    }
    if cfg.patch.contains(&0) {
        return Err(ConfigError::Invalid("patch extents must be positive".into()));
    }
    let mut shape = cfg.patch;
    let mut trace = vec![shape];
    for (i, f) in cfg.factors.iter().enumerate() {
        for a in 0..3 {
            if f[a] == 0 || shape[a] % f[a] != 0 {
                return Err(ConfigError::Indivisible {
                    axis: AXES[a],
                    level: i + 1,
                    extent: shape[a],
                    factor: f[a],
                });
            }
            shape[a] /= f[a];
        }
        trace.push(shape);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub stage1: UNet3DConfig,
    pub stage2: UNet3DConfig,
    /// Fraction of the box extent added on each side.
    pub roi_margin: f64,
    /// Training-time per-side box jitter as a fraction of the extent.
    pub roi_jitter: f64,
    /// Coarse-mask components smaller than this fraction of the largest
    /// component are ignored when placing the ROI.
    pub roi_min_component: f64,
}

impl CascadeConfig {
    pub fn toy() -> Self {
        CascadeConfig {
            stage1: UNet3DConfig::toy(),
            stage2: UNet3DConfig::toy(),
            roi_margin: 0.25,
            roi_jitter: 0.1,
            roi_min_component: 0.1,
        }
    }

    pub fn stage2_input_shape(&self) -> [usize; 3] {
        self.stage2.patch
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if !(self.roi_margin >= 0.0) || !(self.roi_jitter >= 0.0) {
            return Err(ConfigError::Invalid("roi_margin and roi_jitter must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.roi_min_component) {
            return Err(ConfigError::Invalid("roi_min_component must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile, base: &CascadeConfig) -> Result<Self, ConfigError> {
        let stage1 = UNet3DConfig::from_kv(kv, "", &base.stage1)?;
        let stage2 = UNet3DConfig::from_kv(kv, "stage2.", &base.stage2)?;
        let cfg = CascadeConfig {
            stage1,
            stage2,
            roi_margin: kv.get_parsed("roi_margin")?.unwrap_or(base.roi_margin),
            roi_jitter: kv.get_parsed("roi_jitter")?.unwrap_or(base.roi_jitter),
            roi_min_component: kv.get_parsed("roi_min_component")?.unwrap_or(base.roi_min_component),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        self.stage1.to_kv("", kv);
        self.stage2.to_kv("stage2.", kv);
        kv.set("roi_margin", self.roi_margin);
        kv.set("roi_jitter", self.roi_jitter);
        kv.set("roi_min_component", self.roi_min_component);
    }
}

/// Ordered `key = value` map. Lines starting with `#` and blank lines are
/// ignored; a repeated key is an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvFile::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                detail: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Parse { line: i + 1, detail: "empty key".into() });
            }
            if kv.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Parse { line: i + 1, detail: format!("duplicate key {k:?}") });
            }
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::Invalid(format!("{key}: cannot parse {v:?}"))),
        }
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvFile) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect(),
        )
    }
}

pub fn triple(t: [usize; 3]) -> String {
    format!("{}x{}x{}", t[0], t[1], t[2])
}

pub fn parse_triple(s: &str, key: &str) -> Result<[usize; 3], ConfigError> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let bad = || ConfigError::Invalid(format!("{key}: expected DxHxW, got {:?}", s.trim()));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

pub(crate) fn parse_list<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>, ConfigError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{key}: cannot parse {:?}", p.trim())))
        })
        .collect()
}

pub(crate) fn join<'a, T: Display + 'a>(items: impl IntoIterator<Item = &'a T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}
