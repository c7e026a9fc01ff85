//! JSON scene configuration.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::distribution::{Approximation, DEFAULT_GRID_SIDE, DEFAULT_GRID_SPAN};
use crate::error::{Error, Result};
use crate::heatmap::{Interpolation, DEFAULT_LOG_FLOOR};
use crate::projection::{CameraIntrinsics, Pose};
use crate::rotation_grid::Rotation;

pub const DEFAULT_RECURSION: u32 = 3;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_POSITION_NOISE_MM: f64 = 10.0;
pub const DEFAULT_CROP_SCALE_JITTER: f64 = 0.05;

/// One evaluation scene. Relative paths are resolved against the directory
/// holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// CSV of object-frame points in meters.
    pub keypoints_path: PathBuf,
    /// When set, this many keypoints are chosen from the file by farthest
    /// point sampling; otherwise every row is a keypoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoint_count: Option<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub keypoint_seed_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmaps_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisConfig>,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: PoseConfig,
    /// Center of the translation grid; defaults to the ground truth position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_estimate: Option<[f64; 3]>,
    #[serde(default = "default_recursion")]
    pub recursion: u32,
    #[serde(default)]
    pub translation_grid: TranslationGridConfig,
    #[serde(default)]
    pub mode: Approximation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default = "default_log_floor")]
    pub log_floor: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Object-frame symmetry rotations as `[w, x, y, z]`; the identity is
    /// implied.
    #[serde(default)]
    pub symmetries: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    /// `[w, x, y, z]`, normalized on load.
    pub rotation: [f64; 4],
    /// Meters, camera frame.
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationGridConfig {
    /// Samples per axis of the square grid parallel to the image plane.
    #[serde(default = "default_side")]
    pub side: usize,
    /// Full width of that grid in meters.
    #[serde(default = "default_span")]
    pub span: f64,
    /// Depth offsets in meters; the planar grid is repeated at each.
    #[serde(default = "default_depths")]
    pub depth_offsets: Vec<f64>,
}

impl Default for TranslationGridConfig {
    fn default() -> Self {
        TranslationGridConfig {
            side: DEFAULT_GRID_SIDE,
            span: DEFAULT_GRID_SPAN,
            depth_offsets: default_depths(),
        }
    }
}

/// Simulated detector noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Half-width in millimeters of the uniform per-axis position noise.
    #[serde(default = "default_position_noise")]
    pub position_half_width_mm: f64,
    /// Half-width of the uniform relative crop scale jitter.
    #[serde(default = "default_scale_jitter")]
    pub crop_scale_jitter: f64,
    /// Half-width in crop pixels of the uniform crop translation jitter.
    /// When absent, the shift is drawn from the range that keeps every
    /// projected keypoint inside the crop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_translation_jitter: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            position_half_width_mm: DEFAULT_POSITION_NOISE_MM,
            crop_scale_jitter: DEFAULT_CROP_SCALE_JITTER,
            crop_translation_jitter: None,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            position_half_width_mm: 0.0,
            crop_scale_jitter: 0.0,
            crop_translation_jitter: Some(0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position_half_width_mm == 0.0
            && self.crop_scale_jitter == 0.0
            && self.crop_translation_jitter == Some(0.0)
    }
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}
fn default_recursion() -> u32 {
    DEFAULT_RECURSION
}
fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_side() -> usize {
    DEFAULT_GRID_SIDE
}
fn default_span() -> f64 {
    DEFAULT_GRID_SPAN
}
fn default_depths() -> Vec<f64> {
    vec![0.0]
}
fn default_log_floor() -> f64 {
    DEFAULT_LOG_FLOOR
}
fn default_position_noise() -> f64 {
    DEFAULT_POSITION_NOISE_MM
}
fn default_scale_jitter() -> f64 {
    DEFAULT_CROP_SCALE_JITTER
}

impl PoseConfig {
    pub fn from_pose(pose: &Pose) -> Self {
        let t = pose.translation;
        PoseConfig {
            rotation: pose.rotation.wxyz(),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let [w, x, y, z] = self.rotation;
        let rotation = Rotation::from_wxyz(w, x, y, z)
            .map_err(|e| Error::config("gt_pose.rotation", e.to_string()))?;
        Ok(Pose::new(rotation, Vector3::from(self.translation)))
    }
}

impl SceneConfig {
    /// Reads and validates a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: SceneConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        self.keypoints_path = resolve(&self.keypoints_path);
        if let Some(h) = &self.heatmaps_path {
            self.heatmaps_path = Some(resolve(h));
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.heatmaps_path, &self.synthesis) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "heatmaps_path",
                    "give either heatmaps_path or synthesis, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "heatmaps_path",
                    "one of heatmaps_path or synthesis is required",
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.synthesis {
            if !(s.sigma.is_finite() && s.sigma > 0.0) {
                return Err(Error::config(
                    "synthesis.sigma",
                    "must be finite and positive",
                ));
            }
            for (i, q) in s.symmetries.iter().enumerate() {
                Rotation::from_wxyz(q[0], q[1], q[2], q[3]).map_err(|e| {
                    Error::config(format!("synthesis.symmetries[{i}]"), e.to_string())
                })?;
            }
        }
        if self.keypoint_count == Some(0) {
            return Err(Error::config("keypoint_count", "must be positive"));
        }
        self.intrinsics.validate()?;
        self.gt_pose.to_pose()?;
        if !self.gt_pose.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::config("gt_pose.translation", "must be finite"));
        }
        if let Some(m) = self.position_estimate {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::config("position_estimate", "must be finite"));
            }
        }
        if self.recursion > 8 {
            return Err(Error::config(
                "recursion",
                format!("{} exceeds 8", self.recursion),
            ));
        }
        let grid = &self.translation_grid;
        if grid.side == 0 {
            return Err(Error::config("translation_grid.side", "must be positive"));
        }
        if !(grid.span.is_finite() && grid.span >= 0.0) {
            return Err(Error::config(
                "translation_grid.span",
                "must be finite and non-negative",
            ));
        }
        if grid.depth_offsets.is_empty() || !grid.depth_offsets.iter().all(|v| v.is_finite()) {
            return Err(Error::config(
                "translation_grid.depth_offsets",
                "must be a non-empty list of finite values",
            ));
        }
        if !(self.log_floor.is_finite() && self.log_floor <= 0.0) {
            return Err(Error::config("log_floor", "must be finite and at most 0"));
        }
        if let Some(noise) = &self.noise {
            for (name, v) in [
                ("position_half_width_mm", noise.position_half_width_mm),
                ("crop_scale_jitter", noise.crop_scale_jitter),
                (
                    "crop_translation_jitter",
                    noise.crop_translation_jitter.unwrap_or(0.0),
                ),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::config(
                        format!("noise.{name}"),
                        "must be finite and non-negative",
                    ));
                }
            }
            if noise.crop_scale_jitter >= 1.0 {
                return Err(Error::config("noise.crop_scale_jitter", "must be below 1"));
            }
            if !noise.is_zero() && self.seed.is_none() {
                return Err(Error::config("seed", "required when noise is enabled"));
            }
        }
        Ok(())
    }

    /// The configured noise, or none when the block is absent.
    pub fn effective_noise(&self) -> NoiseConfig {
        self.noise.clone().unwrap_or_else(NoiseConfig::none)
    }
}
