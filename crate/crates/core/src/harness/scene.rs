//! Turns a [`SceneConfig`] into the inputs of a grid evaluation, applying
//! simulated detector noise.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{NoiseConfig, SceneConfig};
use crate::distribution::{Approximation, TranslationGrid};
use crate::error::{Error, Result};
use crate::heatmap::{read_heatmaps, synthesize_heatmaps, HeatmapStack, SymmetrySet};
use crate::projection::{
    farthest_point_sample, project_keypoints, read_point_csv, CameraIntrinsics, KeypointSet, Pose,
};
use crate::rotation_grid::Rotation;

const POSITION_STREAM: u64 = 1;
const CROP_STREAM: u64 = 2;
/// Keypoints are kept at least this many pixels inside the crop border by
/// the automatic crop shift.
const CROP_MARGIN_PX: f64 = 1.0;

/// The noise actually drawn for a scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedNoise {
    /// Added to the position estimate, meters.
    pub position_offset: [f64; 3],
    /// Multiplier on the crop scale.
    pub crop_scale_factor: f64,
    /// Shift of the crop window in crop pixels (keypoints move by minus this).
    pub crop_shift_px: [f64; 2],
    /// Per-axis `[low, high]` range the shift was drawn from.
    pub crop_shift_range_px: [[f64; 2]; 2],
}

impl AppliedNoise {
    fn none() -> Self {
        AppliedNoise {
            position_offset: [0.0; 3],
            crop_scale_factor: 1.0,
            crop_shift_px: [0.0; 2],
            crop_shift_range_px: [[0.0; 2]; 2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub keypoints: KeypointSet,
    pub heatmaps: HeatmapStack,
    /// Crop intrinsics after jitter.
    pub camera: CameraIntrinsics,
    pub gt_pose: Pose,
    pub symmetries: SymmetrySet,
    pub translation_grid: TranslationGrid,
    pub recursion: u32,
    pub mode: Approximation,
    pub noise: AppliedNoise,
}

pub fn load_keypoints(config: &SceneConfig) -> Result<KeypointSet> {
    let cloud = read_point_csv(&config.keypoints_path)?;
    let points = match config.keypoint_count {
        Some(n) => farthest_point_sample(&cloud, n, config.keypoint_seed_index)
            .map_err(|e| Error::config("keypoint_count", e.to_string()))?,
        None => cloud,
    };
    KeypointSet::new(points).map_err(|e| Error::config("keypoints_path", e.to_string()))
}

pub fn symmetry_set(config: &SceneConfig) -> Result<SymmetrySet> {
    let rotations = match &config.synthesis {
        Some(s) => s
            .symmetries
            .iter()
            .map(|q| Rotation::from_wxyz(q[0], q[1], q[2], q[3]))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(SymmetrySet::new(rotations))
}

impl Scene {
    pub fn build(config: &SceneConfig) -> Result<Self> {
        Self::build_with_noise(config, &config.effective_noise())
    }

    /// Ground truth crop and position, ignoring any noise block.
    pub fn build_noiseless(config: &SceneConfig) -> Result<Self> {
        Self::build_with_noise(config, &NoiseConfig::none())
    }

    fn build_with_noise(config: &SceneConfig, noise: &NoiseConfig) -> Result<Self> {
        config.validate()?;
        let keypoints = load_keypoints(config)?;
        let gt_pose = config.gt_pose.to_pose()?;
        let symmetries = symmetry_set(config)?;
        let seed = config.seed.unwrap_or(0);
        let mut applied = AppliedNoise::none();

        let mut camera = config.intrinsics;
        let heatmaps = match (&config.synthesis, &config.heatmaps_path) {
            (Some(synthesis), _) => {
                if noise.crop_scale_jitter != 0.0 || noise.crop_translation_jitter != Some(0.0) {
                    camera = jitter_crop(&keypoints, &gt_pose, &camera, noise, seed, &mut applied)?;
                }
                synthesize_heatmaps(&keypoints, &gt_pose, &symmetries, &camera, synthesis.sigma)?
                    .quantized()
            }
            (None, Some(path)) => {
                if noise.crop_scale_jitter != 0.0 || noise.crop_translation_jitter != Some(0.0) {
                    log::warn!("crop jitter is ignored for precomputed heatmaps");
                }
                let h = read_heatmaps(path)?;
                if h.resolution() != camera.resolution {
                    return Err(Error::config(
                        "intrinsics.resolution",
                        format!(
                            "{} does not match the {}x{} heatmaps",
                            camera.resolution,
                            h.resolution(),
                            h.resolution()
                        ),
                    ));
                }
                if h.channels() != keypoints.len() {
                    return Err(Error::ChannelMismatch {
                        heatmaps: h.channels(),
                        keypoints: keypoints.len(),
                    });
                }
                h
            }
            (None, None) => unreachable!("validated"),
        }
        .with_log_floor(config.log_floor)
        .with_interpolation(config.interpolation);

        let estimate = config
            .position_estimate
            .map(Vector3::from)
            .unwrap_or(gt_pose.translation);
        let center = if noise.position_half_width_mm > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(POSITION_STREAM);
            let h = noise.position_half_width_mm * 1e-3;
            let offset = Vector3::from_fn(|_, _| symmetric_uniform(&mut rng, h));
            applied.position_offset = offset.into();
            estimate + offset
        } else {
            estimate
        };
        let grid = &config.translation_grid;
        let translation_grid = TranslationGrid::planar(center, grid.side, grid.span)
            .and_then(|g| g.with_depth_offsets(&grid.depth_offsets))
            .map_err(|e| Error::config("translation_grid", e.to_string()))?;

        Ok(Scene {
            keypoints,
            heatmaps,
            camera,
            gt_pose,
            symmetries,
            translation_grid,
            recursion: config.recursion,
            mode: config.mode,
            noise: applied,
        })
    }
}

/// Uniform on `[-h, h)`; exactly zero when `h` is zero.
fn symmetric_uniform<R: Rng>(rng: &mut R, h: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * h
}

/// Rescales the crop about its center, then shifts it. Without an explicit
/// bound the shift is drawn from the range that keeps every projected
/// keypoint at least one pixel inside the crop.
fn jitter_crop(
    keypoints: &KeypointSet,
    gt_pose: &Pose,
    camera: &CameraIntrinsics,
    noise: &NoiseConfig,
    seed: u64,
    applied: &mut AppliedNoise,
) -> Result<CameraIntrinsics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CROP_STREAM);
    let factor = 1.0 + symmetric_uniform(&mut rng, noise.crop_scale_jitter);
    let (ux, uy) = (rng.random::<f64>(), rng.random::<f64>());

    let half = camera.resolution as f64 / 2.0;
    let center = Vector2::from(camera.crop_offset) + Vector2::repeat(half / camera.crop_scale);
    let scale = camera.crop_scale * factor;
    let mut jittered = CameraIntrinsics {
        crop_scale: scale,
        crop_offset: (center - Vector2::repeat(half / scale)).into(),
        ..*camera
    };

    let ranges = match noise.crop_translation_jitter {
        Some(b) => [[-b, b], [-b, b]],
        None => {
            let projected = project_keypoints(keypoints, gt_pose, &jittered)?;
            let r = camera.resolution as f64;
            let mut ranges = [[0.0; 2]; 2];
            for (axis, range) in ranges.iter_mut().enumerate() {
                let lo = projected
                    .iter()
                    .map(|p| p[axis])
                    .fold(f64::INFINITY, f64::min);
                let hi = projected
                    .iter()
                    .map(|p| p[axis])
                    .fold(f64::NEG_INFINITY, f64::max);
                // crop coordinate k becomes k - shift
                let (a, b) = (hi - (r - CROP_MARGIN_PX), lo - CROP_MARGIN_PX);
                *range = if a <= b {
                    [a, b]
                } else {
                    log::warn!("keypoints do not fit inside the crop; centering them");
                    let mid = 0.5 * (a + b);
                    [mid, mid]
                };
            }
            ranges
        }
    };
    let shift = [
        ranges[0][0] + ux * (ranges[0][1] - ranges[0][0]),
        ranges[1][0] + uy * (ranges[1][1] - ranges[1][0]),
    ];
    jittered.crop_offset[0] += shift[0] / scale;
    jittered.crop_offset[1] += shift[1] / scale;

    applied.crop_scale_factor = factor;
    applied.crop_shift_px = shift;
    applied.crop_shift_range_px = ranges;
    Ok(jittered)
}
