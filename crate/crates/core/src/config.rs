//! Run configuration: named presets, TOML or JSON files layered on top, and
//! `key.path=value` overrides. Every key is checked against the schema;
//! unknown keys are rejected.
//!
//! Grammar (TOML): top-level sections `[data]`, `[fusion]`, `[pretext]`,
//! `[localize]`, `[separation]`, `[transfer]`, `[metrics]`, with nested
//! tables such as `[pretext.schedule]`. Keys mirror the field names of the
//! corresponding structs. A `preset = "toy" | "paper-geometry"` key picks the
//! defaults the file is layered over.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FrameFormat, SceneParams};
use crate::error::{Error, Result};
use crate::fusenet::FusionConfig;
use crate::localize::HeatmapMode;
use crate::optim::{OptimizerKind, TrainSchedule};
use crate::pretext::PretextConfig;
use crate::separate::{SepConfig, SepTrainConfig};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Desk-scale settings used by every acceptance run.
    Toy,
    /// The full-size shapes; builds and validates, not meant to train here.
    PaperGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneParams,
    pub frame_format: FrameFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Synthetic clips scored when no clip is given.
    pub clips: usize,
    pub mode: HeatmapMode,
    /// Heatmap opacity over the frame.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Rate both sides are resampled to before scoring; 0 keeps the file rate.
    pub resample_hz: u32,
    /// Spectrogram used for the on/off error.
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub log_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub fusion: FusionConfig,
    pub pretext: PretextConfig,
    pub localize: LocalizeConfig,
    pub separation: SepTrainConfig,
    pub transfer: TransferConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => RunConfig {
                preset: p,
                data: DataConfig { scene: SceneParams::toy(), frame_format: FrameFormat::Png },
                fusion: FusionConfig::toy(),
                pretext: PretextConfig::toy(),
                localize: LocalizeConfig { clips: 100, mode: HeatmapMode::PerImage, alpha: 0.5 },
                separation: SepTrainConfig::toy(),
                transfer: TransferConfig::toy(),
                metrics: MetricsConfig { resample_hz: 0, frame_ms: 64.0, hop_ms: 16.0, log_eps: 1e-5 },
            },
            Preset::PaperGeometry => {
                let scene = SceneParams::paper_geometry();
                let adam = |lr: f64, batch: usize, steps: usize, drop_every: usize| TrainSchedule {
                    optimizer: OptimizerKind::Adam,
                    learning_rate: lr,
                    decay_factor: 0.1,
                    decay_every: drop_every,
                    momentum: 0.9,
                    batch_size: batch,
                    total_steps: steps,
                    clip_norm: 0.0,
                    weight_decay: 0.0,
                };
                RunConfig {
                    preset: p,
                    data: DataConfig { scene: scene.clone(), frame_format: FrameFormat::Tensor },
                    fusion: FusionConfig::paper_geometry(),
                    pretext: PretextConfig {
                        // 10 s source recordings, 125-frame windows, shifts of 2.0–5.8 s
                        scene: SceneParams { frames: 300, ..scene.clone() },
                        window_frames: 125,
                        shift_lo_s: 2.0,
                        shift_hi_s: 5.8,
                        train_clips: 1000,
                        eval_clips: 200,
                        low_rate_warmup_steps: 30_000,
                        schedule: TrainSchedule {
                            optimizer: OptimizerKind::Sgd,
                            learning_rate: 1e-2,
                            decay_factor: 0.5,
                            decay_every: 200_000,
                            momentum: 0.9,
                            batch_size: 15,
                            total_steps: 650_000,
                            clip_norm: 0.0,
                            weight_decay: 0.0,
                        },
                        ..PretextConfig::toy()
                    },
                    localize: LocalizeConfig { clips: 100, mode: HeatmapMode::PerImage, alpha: 0.5 },
                    separation: SepTrainConfig {
                        scene: SceneParams { frames: 63, ..scene.clone() },
                        sep: SepConfig::paper_geometry(),
                        ambient_prob: 0.08,
                        schedule: adam(1e-4, 18, 160_000, 120_000),
                        ..SepTrainConfig::toy()
                    },
                    transfer: TransferConfig {
                        scene,
                        clip_frames: 250,
                        eval_windows: 25,
                        schedule: adam(1e-4, 24, 30_000, 12_000),
                        ..TransferConfig::toy()
                    },
                    metrics: MetricsConfig { resample_hz: 16_000, frame_ms: 64.0, hop_ms: 16.0, log_eps: 1e-5 },
                }
            }
        }
    }

    /// Checks every section on its own; cross-section geometry is checked by the commands that use it.
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.fusion.validate()?;
        self.pretext.validate()?;
        self.separation.validate()?;
        self.transfer.validate()?;
        if !(0.0..=1.0).contains(&self.localize.alpha) {
            return Err(Error::Range(format!("heatmap alpha {} outside [0, 1]", self.localize.alpha)));
        }
        if !(self.metrics.log_eps > 0.0) {
            return Err(Error::Config("metrics log_eps must be positive".into()));
        }
        Ok(())
    }

    /// Preset, then `file`, then `overrides` (`a.b.c=value`, value in TOML syntax
    /// or a bare string). A preset named on the command line wins over one in the file.
    pub fn load(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let user = match file {
            Some(path) => read_value(path)?,
            None => toml::Value::Table(Default::default()),
        };
        let from_file = match user.get("preset") {
            Some(v) => Some(Preset::deserialize(v.clone()).map_err(|e| Error::Schema(format!("preset: {}", e)))?),
            None => None,
        };
        let base = RunConfig::preset(preset.or(from_file).unwrap_or(Preset::Toy));
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Schema(e.to_string()))?;
        merge(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(p) = preset {
            value.as_table_mut().unwrap().insert("preset".into(), toml::Value::try_from(p).unwrap());
        }
        let cfg = RunConfig::deserialize(value).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }
}

fn read_value(path: &Path) -> Result<toml::Value> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let value = if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        toml::Value::try_from(json).map_err(|e| bad(e.to_string()))?
    } else {
        toml::Value::Table(toml::from_str(&text).map_err(|e: toml::de::Error| bad(e.to_string()))?)
    };
    if !value.is_table() {
        return Err(bad("top level must be a table".into()));
    }
    Ok(value)
}

/// Recursively overlays `top` on `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Schema(format!("override {:?} is not key=value", spec)))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    let keys: Vec<&str> = path.trim().split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| Error::Schema(format!("{} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}
