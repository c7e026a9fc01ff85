//! Keypoint heatmaps: per-channel probability grids over crop pixels.
//!
//! Pixel `(u, v)` covers `[u, u+1) x [v, v+1)` in crop coordinates and its
//! center is `(u + 0.5, v + 0.5)`. Data is stored channel-major, then
//! row-major (`v` selects the row).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{CameraIntrinsics, KeypointSet, Pose};
use crate::rotation_grid::Rotation;

pub const DEFAULT_LOG_FLOOR: f64 = -30.0;

const MAGIC: &[u8; 4] = b"KPHM";
const VERSION: u32 = 1;
/// Channels within this distance of unit mass are accepted as-is.
const NORMALIZED_TOL: f64 = 1e-6;
/// Channels within this distance of unit mass are renormalized on read.
const RENORMALIZE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone)]
pub struct HeatmapStack {
    resolution: usize,
    channels: usize,
    data: Vec<f64>,
    log_floor: f64,
    interpolation: Interpolation,
    // clamped natural logs of `data`, for nearest-pixel lookups
    log_table: Vec<f64>,
}

impl HeatmapStack {
    /// Wraps normalized data; every channel must sum to one within 1e-6.
    pub fn new(resolution: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(resolution, channels, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "heatmap values must be finite and non-negative, found {v}"
            )));
        }
        let cells = resolution * resolution;
        for (c, chunk) in data.chunks_exact(cells).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if (sum - 1.0).abs() > NORMALIZED_TOL {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self::assemble(resolution, channels, data))
    }

    /// Scales each channel to unit mass. Channels with no mass are rejected.
    pub fn from_unnormalized(
        resolution: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        check_shape(resolution, channels, data.len())?;
        let cells = resolution * resolution;
        for (c, chunk) in data.chunks_exact_mut(cells).enumerate() {
            if chunk.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} has negative or non-finite values"
                )));
            }
            let sum: f64 = chunk.iter().sum();
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::Degenerate(format!("channel {c} has no mass")));
            }
            chunk.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Self::assemble(resolution, channels, data))
    }

    /// Uniform heatmaps: every cell holds `1 / r^2`.
    pub fn uniform(resolution: usize, channels: usize) -> Result<Self> {
        let n = resolution * resolution;
        Self::new(resolution, channels, vec![1.0 / n as f64; n * channels])
    }

    fn assemble(resolution: usize, channels: usize, data: Vec<f64>) -> Self {
        let mut h = HeatmapStack {
            resolution,
            channels,
            data,
            log_floor: DEFAULT_LOG_FLOOR,
            interpolation: Interpolation::Nearest,
            log_table: Vec::new(),
        };
        h.rebuild_log_table();
        h
    }

    fn rebuild_log_table(&mut self) {
        let floor = self.log_floor;
        self.log_table = self.data.iter().map(|&v| clamped_ln(v, floor)).collect();
    }

    pub fn with_log_floor(mut self, log_floor: f64) -> Self {
        self.log_floor = log_floor;
        self.rebuild_log_table();
        self
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn value(&self, c: usize, u: usize, v: usize) -> f64 {
        self.channel(c)[v * self.resolution + u]
    }

    /// Copy with every value rounded to the single precision used on disk,
    /// i.e. exactly what a write/read round trip yields.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        let mut h = Self::assemble(self.resolution, self.channels, data);
        h.log_floor = self.log_floor;
        h.interpolation = self.interpolation;
        h.rebuild_log_table();
        h
    }

    /// Log probability of `channel` at crop-pixel position `point`, never
    /// below the log floor. Points outside the crop get the floor.
    pub fn log_lookup(&self, channel: usize, point: &Vector2<f64>) -> f64 {
        self.log_at(channel, point.x, point.y)
    }

    #[inline]
    pub(crate) fn log_at(&self, channel: usize, x: f64, y: f64) -> f64 {
        let r = self.resolution as f64;
        // also rejects NaN
        if !(x >= 0.0 && x < r && y >= 0.0 && y < r) {
            return self.log_floor;
        }
        match self.interpolation {
            Interpolation::Nearest => {
                let u = x as usize;
                let v = y as usize;
                self.log_table[(channel * self.resolution + v) * self.resolution + u]
            }
            Interpolation::Bilinear => clamped_ln(self.bilinear(channel, x, y), self.log_floor),
        }
    }

    fn bilinear(&self, channel: usize, x: f64, y: f64) -> f64 {
        let r = self.resolution as isize;
        let data = self.channel(channel);
        let fx = x - 0.5;
        let fy = y - 0.5;
        let u0 = fx.floor();
        let v0 = fy.floor();
        let (wx, wy) = (fx - u0, fy - v0);
        let (u0, v0) = (u0 as isize, v0 as isize);
        let at = |u: isize, v: isize| -> f64 {
            if u < 0 || v < 0 || u >= r || v >= r {
                0.0
            } else {
                data[(v * r + u) as usize]
            }
        };
        (1.0 - wy) * ((1.0 - wx) * at(u0, v0) + wx * at(u0 + 1, v0))
            + wy * ((1.0 - wx) * at(u0, v0 + 1) + wx * at(u0 + 1, v0 + 1))
    }

    pub fn encode<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        for v in [VERSION, self.resolution as u32, self.channels as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Parses a KPHM stream. Returns the stack and the channels that had to be
    /// renormalized because their mass was off by more than 1e-6 but at most 1e-3.
    pub fn decode<R: Read>(mut input: R) -> Result<(Self, Vec<usize>)> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        if bytes.len() < 16 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected KPHM",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (version, r, n) = (word(1), word(2) as usize, word(3) as usize);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if r == 0 || n == 0 {
            return Err(Error::Format(format!(
                "empty stack ({n} channels of {r}x{r})"
            )));
        }
        let expected = r
            .checked_mul(r)
            .and_then(|c| c.checked_mul(n))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let payload = &bytes[16..];
        if payload.len() < expected {
            return Err(Error::Format(format!(
                "truncated payload: {} of {expected} bytes",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let mut data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Format(format!("invalid probability value {v}")));
        }
        let mut renormalized = Vec::new();
        for (c, chunk) in data.chunks_exact_mut(r * r).enumerate() {
            let sum: f64 = chunk.iter().sum();
            let off = (sum - 1.0).abs();
            if off <= NORMALIZED_TOL {
                continue;
            }
            if off <= RENORMALIZE_TOL {
                chunk.iter_mut().for_each(|v| *v /= sum);
                renormalized.push(c);
            } else {
                return Err(Error::Format(format!(
                    "channel {c} sums to {sum}, outside the 1e-3 tolerance"
                )));
            }
        }
        Ok((Self::assemble(r, n, data), renormalized))
    }
}

fn check_shape(resolution: usize, channels: usize, len: usize) -> Result<()> {
    if resolution == 0 || channels == 0 {
        return Err(Error::InvalidArgument("empty heatmap stack".into()));
    }
    if len != resolution * resolution * channels {
        return Err(Error::InvalidArgument(format!(
            "expected {} values for {channels} channels of {resolution}x{resolution}, got {len}",
            resolution * resolution * channels
        )));
    }
    Ok(())
}

#[inline]
fn clamped_ln(v: f64, floor: f64) -> f64 {
    if v > 0.0 {
        v.ln().max(floor)
    } else {
        floor
    }
}

pub fn write_heatmaps(h: &HeatmapStack, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    h.encode(&mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a KPHM file, warning about channels that were renormalized.
pub fn read_heatmaps(path: &Path) -> Result<HeatmapStack> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (h, renormalized) = HeatmapStack::decode(std::io::BufReader::new(file))?;
    for c in renormalized {
        log::warn!(
            "{}: channel {c} was not normalized; rescaled",
            path.display()
        );
    }
    Ok(h)
}

/// Object-frame symmetry transforms; always contains the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetrySet {
    rotations: Vec<Rotation>,
}

impl SymmetrySet {
    pub fn identity() -> Self {
        SymmetrySet {
            rotations: vec![Rotation::identity()],
        }
    }

    /// The identity is prepended when missing.
    pub fn new(mut rotations: Vec<Rotation>) -> Self {
        let id = Rotation::identity();
        if !rotations.contains(&id) {
            rotations.insert(0, id);
        }
        SymmetrySet { rotations }
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

impl Default for SymmetrySet {
    fn default() -> Self {
        Self::identity()
    }
}

/// Renders ground-truth style heatmaps: channel `i` is the equal-weight
/// mixture, over the symmetric poses `gt_pose * S`, of isotropic Gaussians of
/// standard deviation `sigma` pixels centered on keypoint `i`'s projection,
/// evaluated at pixel centers and renormalized over the crop.
pub fn synthesize_heatmaps(
    keypoints: &KeypointSet,
    gt_pose: &Pose,
    symmetries: &SymmetrySet,
    camera: &CameraIntrinsics,
    sigma: f64,
) -> Result<HeatmapStack> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    camera.validate()?;
    let r = camera.resolution;
    if r < 8 {
        return Err(Error::InvalidArgument(format!(
            "crop resolution must be at least 8, got {r}"
        )));
    }

    let centers: Vec<Vec<Vector2<f64>>> = symmetries
        .rotations()
        .iter()
        .map(|s| {
            crate::projection::project_keypoints(
                keypoints,
                &gt_pose.with_object_rotation(s),
                camera,
            )
        })
        .collect::<Result<_>>()?;

    let weight = 1.0 / (symmetries.len() as f64 * 2.0 * PI * sigma * sigma);
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0; keypoints.len() * r * r];
    for (i, channel) in data.chunks_exact_mut(r * r).enumerate() {
        for component in &centers {
            let k = component[i];
            // separable: exp(-(dx^2 + dy^2)/2s^2) = gx(u) * gy(v)
            let gx: Vec<f64> = (0..r)
                .map(|u| (-(u as f64 + 0.5 - k.x).powi(2) * inv_two_var).exp())
                .collect();
            for v in 0..r {
                let gy = weight * (-(v as f64 + 0.5 - k.y).powi(2) * inv_two_var).exp();
                if gy == 0.0 {
                    continue;
                }
                let row = &mut channel[v * r..(v + 1) * r];
                for (cell, g) in row.iter_mut().zip(&gx) {
                    *cell += gy * g;
                }
            }
        }
        let mass: f64 = channel.iter().sum();
        if mass.is_nan() || mass <= 0.0 {
            return Err(Error::Degenerate(format!(
                "keypoint {i} has no heatmap mass inside the crop"
            )));
        }
        channel.iter_mut().for_each(|v| *v /= mass);
    }
    Ok(HeatmapStack::assemble(r, keypoints.len(), data))
}
