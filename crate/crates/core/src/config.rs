//! JSON configuration for pipeline runs and benchmark grids.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::error::{config_err, Error, Result};
use crate::nets::{DEFAULT_BOTTLENECK, DEFAULT_HIDDEN_WIDTH, DEFAULT_MID_WIDTH, DEFAULT_REDUCE_WIDTH};

/// Framework configuration: `S` propagates key-frame features with the
/// alignment operator only; `F` adds recursive updating of a temporal
/// feature and transform/quality fusion on non-key frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    S,
    F,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::S => "S",
            Mode::F => "F",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Mode::S),
            "F" | "f" => Ok(Mode::F),
            other => Err(config_err(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channels {
    pub low: usize,
    pub feat: usize,
    /// Width of the two alignment embeddings; 0 compares raw features.
    pub embed: usize,
}

impl Channels {
    /// Channel sizes of the full-scale model.
    pub const FULL: Channels = Channels { low: 1024, feat: 1024, embed: 256 };
}

/// Hidden widths of the fusion and transform nets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Widths {
    pub fusion_reduce: usize,
    pub fusion_hidden: usize,
    pub bottleneck: usize,
    pub transform_mid: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            fusion_reduce: DEFAULT_REDUCE_WIDTH,
            fusion_hidden: DEFAULT_HIDDEN_WIDTH,
            bottleneck: DEFAULT_BOTTLENECK,
            transform_mid: DEFAULT_MID_WIDTH,
        }
    }
}

impl Widths {
    /// Narrow nets for quick runs.
    pub fn small() -> Self {
        Self { fusion_reduce: 16, fusion_hidden: 8, bottleneck: 16, transform_mid: 16 }
    }
}

/// Parameters of the synthetic video generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoParams {
    /// Per-frame, per-axis probability of a one-cell step.
    pub motion_prob: f32,
    /// Bound on the cumulative displacement along each axis.
    pub max_displacement: usize,
    /// Standard deviation of the texture.
    pub texture_scale: f32,
    pub blob_gain: f32,
    pub blob_sigma: f32,
    pub high_noise: f32,
    pub low_noise: f32,
    pub low_blob_gain: f32,
    /// Low-level features are an exact copy of the high-level ones.
    pub low_copies_high: bool,
}

impl Default for VideoParams {
    fn default() -> Self {
        Self {
            motion_prob: 0.3,
            max_displacement: 2,
            texture_scale: 1.0,
            blob_gain: 1.0,
            blob_sigma: 1.5,
            high_noise: 0.1,
            low_noise: 0.5,
            low_blob_gain: 0.3,
            low_copies_high: false,
        }
    }
}

/// A scalar or a list of values to sweep over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// One fully specified pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub mode: Mode,
    pub d: usize,
    pub interval: usize,
    pub channels: Channels,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub widths: Widths,
    pub video: VideoParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(config_err("d must be at least 1"));
        }
        if self.interval == 0 {
            return Err(config_err("interval must be at least 1"));
        }
        if self.frames == 0 {
            return Err(config_err("frames must be at least 1"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(config_err(format!("impossible spatial dims {}x{}", self.height, self.width)));
        }
        if self.channels.low == 0 || self.channels.feat == 0 {
            return Err(config_err("channel counts must be positive"));
        }
        let w = &self.widths;
        if w.fusion_reduce == 0 || w.fusion_hidden == 0 || w.bottleneck == 0 || w.transform_mid == 0 {
            return Err(config_err("net widths must be positive"));
        }
        if self.video.low_copies_high && self.channels.low != self.channels.feat {
            return Err(config_err("low_copies_high needs channels.low == channels.feat"));
        }
        Ok(())
    }

    /// A small single-cell configuration.
    pub fn small(variant: Variant, mode: Mode, d: usize, interval: usize) -> Self {
        Self {
            variant,
            mode,
            d,
            interval,
            channels: Channels { low: 8, feat: 8, embed: 8 },
            height: 12,
            width: 12,
            frames: 20,
            widths: Widths::small(),
            video: VideoParams::default(),
        }
    }
}

fn default_variant() -> OneOrMany<Variant> {
    OneOrMany::One(Variant::Psla)
}
fn default_mode() -> OneOrMany<Mode> {
    OneOrMany::One(Mode::F)
}
fn default_d() -> OneOrMany<usize> {
    OneOrMany::One(4)
}
fn default_interval() -> OneOrMany<usize> {
    OneOrMany::One(10)
}
fn default_channels() -> Channels {
    Channels { low: 32, feat: 32, embed: 16 }
}
fn default_size() -> usize {
    24
}
fn default_frames() -> usize {
    20
}
fn default_widths() -> Widths {
    Widths::small()
}

/// Configuration file contents; `variant`, `mode`, `d` and `interval`
/// may each be a list, and the run grid is their product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_variant")]
    pub variant: OneOrMany<Variant>,
    #[serde(default = "default_mode")]
    pub mode: OneOrMany<Mode>,
    #[serde(default = "default_d")]
    pub d: OneOrMany<usize>,
    #[serde(default = "default_interval")]
    pub interval: OneOrMany<usize>,
    #[serde(default = "default_channels")]
    pub channels: Channels,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_widths")]
    pub widths: Widths,
    #[serde(default)]
    pub video: VideoParams,
}

impl Default for GridConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults parse")
    }
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GridConfig = serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.cells()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Every grid cell, ordered variant-major, then mode, d and interval.
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        let (vs, ms, ds, is) = (self.variant.values(), self.mode.values(), self.d.values(), self.interval.values());
        if vs.is_empty() || ms.is_empty() || ds.is_empty() || is.is_empty() {
            return Err(config_err("empty sweep list"));
        }
        let mut out = Vec::new();
        for &variant in &vs {
            for &mode in &ms {
                for &d in &ds {
                    for &interval in &is {
                        let cell = RunConfig {
                            variant,
                            mode,
                            d,
                            interval,
                            channels: self.channels,
                            height: self.height,
                            width: self.width,
                            frames: self.frames,
                            widths: self.widths,
                            video: self.video,
                        };
                        cell.validate()?;
                        out.push(cell);
                    }
                }
            }
        }
        Ok(out)
    }
}
