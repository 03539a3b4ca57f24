//! Run configuration for the command-line pipeline.
//!
//! Values are resolved in layers: a preset supplies the base, an optional
//! JSON file overrides any subset of keys, and command-line flags override
//! both. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::PyramidConfig;
use crate::heads::{HeadConfig, PeConfig};
use crate::model::{ModelConfig, SamplingConfig};
use crate::render::Camera;
use crate::scene::{orbit_cameras, Split, SyntheticScene};
use crate::train::TrainConfig;

/// Synthetic dataset layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub boxes: usize,
    pub seed: u64,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            boxes: 12,
            seed: 0,
            train_views: 48,
            test_views: 8,
            width: 64,
            height: 64,
        }
    }
}

impl SynthConfig {
    /// Orbit views with the test views spread evenly through the sequence.
    pub fn views(&self, scene: &SyntheticScene) -> Vec<(Camera, Split)> {
        let n = self.train_views + self.test_views;
        let mut views = orbit_cameras(&scene.extents, n, self.width, self.height, 0);
        for k in 0..self.test_views {
            let idx = (k + 1) * n / self.test_views - 1;
            views[idx].1 = Split::Test;
        }
        views
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Manifest file (or the directory containing `manifest.json`).
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 1 is the strict deterministic mode.
    pub threads: usize,
    /// Rays per graph when rendering.
    pub render_chunk: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out_dir: None,
            checkpoint: None,
            threads: 1,
            render_chunk: 2048,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale hyperparameters.
    Paper,
    /// Desk-scale settings for the 64×64 synthetic benchmark on a CPU.
    Benchmark,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "benchmark" => Ok(Preset::Benchmark),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset '{other}' (expected paper or benchmark)"
            ))),
        }
    }
}

/// Desk-scale training setup: same schedule shape and learning rates, but a
/// 128² base plane, narrower heads, fewer samples and smaller batches so a
/// run fits in minutes on one CPU core.
pub fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        pretrain_iters: 2000,
        joint_iters: 4000,
        batch_rays: 256,
        chunk_rays: 256,
        model: ModelConfig {
            pyramid: PyramidConfig {
                plane_resolution: [128, 128],
                ..PyramidConfig::default()
            },
            heads: HeadConfig {
                grid_hidden: 64,
                grid_hidden_layers: 2,
                nerf_width: 64,
                nerf_depth: 4,
                pe: PeConfig::default(),
            },
        },
        sampling: SamplingConfig {
            n_coarse: 32,
            n_fine: 32,
            ..SamplingConfig::default()
        },
        checkpoint_every: 1000,
        log_every: 100,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig::default(),
            Preset::Benchmark => RunConfig {
                train: benchmark_train_config(),
                ..RunConfig::default()
            },
        }
    }

    /// `base` with every key present in `overrides` replaced (recursively
    /// for objects). Unknown keys surface as errors.
    pub fn merged(base: &RunConfig, overrides: &Value) -> Result<RunConfig> {
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, overrides);
        serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn from_file(base: &RunConfig, path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        Self::merged(base, &v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 || self.render_chunk == 0 {
            return Err(Error::InvalidArgument(
                "threads and render_chunk must be at least 1".into(),
            ));
        }
        self.train.validate()
    }
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Accepts a manifest path or a directory holding `manifest.json`.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p.to_path_buf()
    }
}
