#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posedist::distribution::TranslationGrid;
use posedist::{
    farthest_point_sample, project_keypoints, synthesize_heatmaps, CameraIntrinsics, HeatmapStack,
    KeypointSet, Pose, Rotation, SymmetrySet,
};

pub const RESOLUTION: usize = 128;
pub const CLOUD_SEED: u64 = 42;
pub const KEYPOINTS: usize = 16;

pub struct TestScene {
    pub keypoints: KeypointSet,
    pub heatmaps: HeatmapStack,
    pub camera: CameraIntrinsics,
    pub gt: Pose,
    pub translations: TranslationGrid,
}

/// 500 points filling a 10 x 6 x 4 cm box.
pub fn box_cloud() -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CLOUD_SEED);
    (0..500)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.02..0.02),
            )
        })
        .collect()
}

pub fn box_keypoints() -> KeypointSet {
    KeypointSet::new(farthest_point_sample(&box_cloud(), KEYPOINTS, 0).unwrap()).unwrap()
}

pub fn raw_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 600.0,
        fy: 600.0,
        cx: 320.0,
        cy: 240.0,
        crop_offset: [0.0, 0.0],
        crop_scale: 1.0,
        resolution: RESOLUTION,
    }
}

/// Square crop centered on the projected keypoints, 20% larger than their
/// tight bounding box.
pub fn object_crop(keypoints: &KeypointSet, gt: &Pose) -> CameraIntrinsics {
    let raw = raw_camera();
    let p = project_keypoints(keypoints, gt, &raw).unwrap();
    let lo = |a: usize| p.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
    let hi = |a: usize| p.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
    let side = 1.2 * (hi(0) - lo(0)).max(hi(1) - lo(1));
    let center = [(lo(0) + hi(0)) / 2.0, (lo(1) + hi(1)) / 2.0];
    CameraIntrinsics {
        crop_scale: RESOLUTION as f64 / side,
        crop_offset: [center[0] - side / 2.0, center[1] - side / 2.0],
        ..raw
    }
}

pub fn gt_pose(pose_seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
    Pose::new(Rotation::random(&mut rng), Vector3::new(0.01, -0.005, 0.7))
}

/// Noiseless synthetic scene of the box, sigma = 1 px, heatmaps rounded to
/// their on-disk precision.
pub fn box_scene(pose_seed: u64, symmetries: &SymmetrySet) -> TestScene {
    let keypoints = box_keypoints();
    let gt = gt_pose(pose_seed);
    let camera = object_crop(&keypoints, &gt);
    let heatmaps = synthesize_heatmaps(&keypoints, &gt, symmetries, &camera, 1.0)
        .unwrap()
        .quantized();
    TestScene {
        keypoints,
        heatmaps,
        camera,
        gt,
        translations: TranslationGrid::default_around(gt.translation),
    }
}

/// Half turn about the box's long (x) axis.
pub fn half_turn_x() -> SymmetrySet {
    SymmetrySet::new(vec![Rotation::from_axis_angle(&Vector3::x(), PI)])
}

/// Eight farthest points of the box and their images under the half turn,
/// so the keypoint set is invariant under the symmetry.
pub fn symmetric_box_keypoints() -> KeypointSet {
    let flip = half_turn_x().rotations()[1];
    let half = farthest_point_sample(&box_cloud(), KEYPOINTS / 2, 0).unwrap();
    let mut points = half.clone();
    points.extend(half.iter().map(|p| flip.rotate(p)));
    KeypointSet::new(points).unwrap()
}

/// Noiseless scene of the symmetric box rendered with both symmetric poses.
pub fn symmetric_box_scene(pose_seed: u64) -> TestScene {
    let keypoints = symmetric_box_keypoints();
    let gt = gt_pose(pose_seed);
    let camera = object_crop(&keypoints, &gt);
    let heatmaps = synthesize_heatmaps(&keypoints, &gt, &half_turn_x(), &camera, 1.0)
        .unwrap()
        .quantized();
    TestScene {
        keypoints,
        heatmaps,
        camera,
        gt,
        translations: TranslationGrid::default_around(gt.translation),
    }
}

/// Crop around the object center wide enough that every keypoint projects
/// inside it for any rotation and any translation within `span / 2` of the
/// truth in x and y.
pub fn enclosing_crop(keypoints: &KeypointSet, gt: &Pose, span: f64) -> CameraIntrinsics {
    let raw = raw_camera();
    let rho = keypoints
        .points()
        .iter()
        .map(|p| p.norm())
        .fold(0.0, f64::max);
    let reach = rho + span / 2.0 * 2f64.sqrt();
    let half = 1.1 * raw.fx.max(raw.fy) * reach / (gt.translation.z - rho);
    let c = raw.project(&gt.translation).unwrap();
    CameraIntrinsics {
        crop_scale: RESOLUTION as f64 / (2.0 * half),
        crop_offset: [c.x - half, c.y - half],
        ..raw
    }
}

/// Random normalized heatmap stack with log-uniform cell values, which
/// gives peaked but irregular channels.
pub fn random_stack<R: Rng>(rng: &mut R, resolution: usize, channels: usize) -> HeatmapStack {
    let data = (0..resolution * resolution * channels)
        .map(|_| (rng.random_range(-12.0..0.0f64)).exp())
        .collect();
    HeatmapStack::from_unnormalized(resolution, channels, data).unwrap()
}

/// Random 10 cm object half a meter from a camera with a 32 px crop. Some
/// poses project keypoints outside the crop.
pub fn small_setup(channels: usize, seed: u64) -> (KeypointSet, CameraIntrinsics, TranslationGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..channels)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            )
        })
        .collect();
    let camera = CameraIntrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 16.0,
        cy: 16.0,
        crop_offset: [0.0, 0.0],
        crop_scale: 1.0,
        resolution: 32,
    };
    let grid = TranslationGrid::planar(Vector3::new(0.0, 0.0, 0.5), 3, 0.02).unwrap();
    (KeypointSet::new(points).unwrap(), camera, grid)
}
