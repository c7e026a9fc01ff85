//! Pinhole camera with an axis-aligned crop, plus keypoint selection.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation_grid::Rotation;

/// Pinhole intrinsics and the crop that maps sensor pixels to heatmap pixels:
/// `crop = crop_scale * (sensor - crop_offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub crop_offset: [f64; 2],
    #[serde(default = "unit_scale")]
    pub crop_scale: f64,
    pub resolution: usize,
}

fn unit_scale() -> f64 {
    1.0
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fx", self.fx),
            ("fy", self.fy),
            ("crop_scale", self.crop_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    format!("intrinsics.{name}"),
                    format!("must be finite and positive, got {v}"),
                ));
            }
        }
        for (name, v) in [
            ("cx", self.cx),
            ("cy", self.cy),
            ("crop_offset[0]", self.crop_offset[0]),
            ("crop_offset[1]", self.crop_offset[1]),
        ] {
            if !v.is_finite() {
                return Err(Error::config(
                    format!("intrinsics.{name}"),
                    "must be finite",
                ));
            }
        }
        if self.resolution == 0 {
            return Err(Error::config("intrinsics.resolution", "must be positive"));
        }
        Ok(())
    }

    /// Crop-pixel coordinates of a camera-frame point, or `None` when the
    /// point is not in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Some(Vector2::new(
            self.crop_scale * (u - self.crop_offset[0]),
            self.crop_scale * (v - self.crop_offset[1]),
        ))
    }
}

/// Rigid object pose in the camera frame; translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Maps an object-frame point into the camera frame.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// The pose followed by an object-frame transform `s` (`self * s`).
    pub fn with_object_rotation(&self, s: &Rotation) -> Pose {
        Pose::new(self.rotation.compose(s), self.translation)
    }
}

/// Model keypoints in the object frame, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<Vector3<f64>>,
}

impl KeypointSet {
    /// At least four keypoints that are not all collinear are required for a
    /// pose to be identifiable from their projections.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "need at least 4 keypoints, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("keypoints must be finite".into()));
        }
        let origin = points[0];
        let (far, extent) = points
            .iter()
            .map(|p| (p, (p - origin).norm()))
            .fold((&origin, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let dir = (far - origin) / extent.max(f64::MIN_POSITIVE);
        let off_axis = points
            .iter()
            .map(|p| (p - origin).cross(&dir).norm())
            .fold(0.0, f64::max);
        if extent == 0.0 || off_axis <= 1e-9 * extent {
            return Err(Error::InvalidArgument(
                "keypoints are collinear; pose is not identifiable".into(),
            ));
        }
        Ok(KeypointSet { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Reads `x,y,z` rows (meters). A non-numeric first line is taken as a header.
pub fn read_point_csv(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<_> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 3 => points.push(Vector3::new(v[0], v[1], v[2])),
            None if n == 0 => continue,
            _ => {
                return Err(Error::Format(format!(
                    "{}: line {}: expected `x,y,z`, got `{line}`",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(points)
}

pub fn write_point_csv<W: Write>(mut out: W, points: &[Vector3<f64>]) -> std::io::Result<()> {
    writeln!(out, "x,y,z")?;
    for p in points {
        writeln!(out, "{:.16e},{:.16e},{:.16e}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Projects every keypoint under `pose` into crop pixel coordinates.
///
/// Projections may fall outside `[0, r)^2`; a keypoint at or behind the
/// camera plane is reported as [`Error::BehindCamera`].
pub fn project_keypoints(
    keypoints: &KeypointSet,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<Vec<Vector2<f64>>> {
    keypoints
        .points()
        .iter()
        .enumerate()
        .map(|(index, k)| {
            let p = pose.transform(k);
            camera
                .project(&p)
                .ok_or(Error::BehindCamera { index, depth: p.z })
        })
        .collect()
}

/// Indices chosen by greedy max-min (farthest point) sampling starting at
/// `seed_index`. Ties go to the lowest index.
pub fn farthest_point_indices(
    cloud: &[Vector3<f64>],
    count: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    if count == 0 || count > cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {count} points from a cloud of {}",
            cloud.len()
        )));
    }
    if seed_index >= cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "seed index {seed_index} out of range for {} points",
            cloud.len()
        )));
    }
    let mut selected = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; cloud.len()];
    let mut current = seed_index;
    loop {
        selected.push(current);
        if selected.len() == count {
            return Ok(selected);
        }
        let anchor = cloud[current];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, p) in cloud.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best.1 {
                best = (i, min_dist[i]);
            }
        }
        current = best.0;
    }
}

/// Farthest point sampling of `count` keypoints from a point cloud.
pub fn farthest_point_sample(
    cloud: &[Vector3<f64>],
    count: usize,
    seed_index: usize,
) -> Result<Vec<Vector3<f64>>> {
    Ok(farthest_point_indices(cloud, count, seed_index)?
        .into_iter()
        .map(|i| cloud[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 64.0,
            crop_offset: [0.0, 0.0],
            crop_scale: 1.0,
            resolution: 128,
        }
    }

    fn project_one(k: Vector3<f64>, pose: &Pose) -> Vector2<f64> {
        let p = pose.transform(&k);
        camera().project(&p).unwrap()
    }

    #[test]
    fn projection_examples() {
        let pose = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(
            project_one(Vector3::zeros(), &pose),
            Vector2::new(64.0, 64.0)
        );
        assert_eq!(
            project_one(Vector3::new(0.1, 0.0, 0.0), &pose),
            Vector2::new(74.0, 64.0)
        );
        let flipped = Pose::new(
            Rotation::from_axis_angle(&Vector3::z(), PI),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let k = project_one(Vector3::new(0.1, 0.0, 0.0), &flipped);
        assert!((k - Vector2::new(54.0, 64.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let kp = KeypointSet::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.0, 0.0, 2.0),
        ])
        .unwrap();
        let pose = Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, -1.0));
        let err = project_keypoints(&kp, &pose, &camera()).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { index: 0, .. }));
    }

    #[test]
    fn keypoint_set_validation() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(KeypointSet::new(line).is_err());
        assert!(KeypointSet::new(vec![Vector3::zeros(); 3]).is_err());
        let mut pts: Vec<_> = (0..4)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        pts.push(Vector3::new(0.0, 0.0, 1.0));
        assert!(KeypointSet::new(pts).is_ok());
    }

    fn cube() -> Vec<Vector3<f64>> {
        (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect()
    }

    #[test]
    fn fps_picks_opposite_cube_corner() {
        let c = cube();
        let picked = farthest_point_sample(&c, 2, 0).unwrap();
        assert_eq!(picked[1], Vector3::new(1.0, 1.0, 1.0));
        assert!(((picked[1] - picked[0]).norm() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fps_full_cloud_is_a_permutation() {
        let c = cube();
        let mut idx = farthest_point_indices(&c, 8, 0).unwrap();
        idx.sort();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        assert!(farthest_point_indices(&c, 9, 0).is_err());
        assert!(farthest_point_indices(&c, 0, 0).is_err());
    }
}
