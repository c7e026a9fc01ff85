//! Likelihood evaluation over the pose grid, normalization and scoring.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;
use crate::projection::{CameraIntrinsics, KeypointSet, Pose};
use crate::rotation_grid::{
    covering_radius_estimate, geodesic_distance, nearest_sample, Rotation, RotationGrid,
};

/// How the joint keypoint likelihood is built from the per-keypoint marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    /// N-th root of the product of marginals (geometric mean); assumes the
    /// keypoints are strongly coupled and never sharpens the estimate.
    #[default]
    Coupled,
    /// Plain product of marginals.
    Independent,
}

impl FromStr for Approximation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(Approximation::Coupled),
            "independent" => Ok(Approximation::Independent),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}`, expected coupled or independent"
            ))),
        }
    }
}

impl std::fmt::Display for Approximation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Approximation::Coupled => "coupled",
            Approximation::Independent => "independent",
        })
    }
}

/// Translations sampled around a position estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationGrid {
    center: Vector3<f64>,
    offsets: Vec<Vector3<f64>>,
}

pub const DEFAULT_GRID_SIDE: usize = 11;
pub const DEFAULT_GRID_SPAN: f64 = 0.010;

impl TranslationGrid {
    pub fn new(center: Vector3<f64>, offsets: Vec<Vector3<f64>>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("translation grid is empty".into()));
        }
        Ok(TranslationGrid { center, offsets })
    }

    /// `side x side` offsets in the image-parallel plane covering `span`
    /// meters edge to edge (endpoints included), rows along y, x fastest.
    pub fn planar(center: Vector3<f64>, side: usize, span: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument(
                "translation grid side must be positive".into(),
            ));
        }
        if !(span.is_finite() && span >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid grid span {span}")));
        }
        let coord = |i: usize| {
            if side == 1 {
                0.0
            } else {
                span * (i as f64 / (side - 1) as f64 - 0.5)
            }
        };
        let offsets = (0..side)
            .flat_map(|iy| (0..side).map(move |ix| Vector3::new(coord(ix), coord(iy), 0.0)))
            .collect();
        Self::new(center, offsets)
    }

    /// 11 x 11 samples over 10 mm x 10 mm (1 mm pitch).
    pub fn default_around(center: Vector3<f64>) -> Self {
        Self::planar(center, DEFAULT_GRID_SIDE, DEFAULT_GRID_SPAN).expect("valid defaults")
    }

    /// Repeats the in-plane pattern at each depth offset.
    pub fn with_depth_offsets(self, depths: &[f64]) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::InvalidArgument("no depth offsets given".into()));
        }
        let offsets = depths
            .iter()
            .flat_map(|&dz| {
                self.offsets
                    .iter()
                    .map(move |o| o + Vector3::new(0.0, 0.0, dz))
            })
            .collect();
        Self::new(self.center, offsets)
    }

    pub fn recentered(&self, center: Vector3<f64>) -> Self {
        TranslationGrid {
            center,
            offsets: self.offsets.clone(),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn translation(&self, j: usize) -> Vector3<f64> {
        self.center + self.offsets[j]
    }
}

fn check_channels(h: &HeatmapStack, k: &KeypointSet) -> Result<()> {
    if h.channels() != k.len() {
        return Err(Error::ChannelMismatch {
            heatmaps: h.channels(),
            keypoints: k.len(),
        });
    }
    Ok(())
}

/// Sum of per-keypoint log lookups for keypoints already rotated into the
/// camera frame, or `None` if one of them ends up behind the camera.
#[inline]
fn summed_log_lookup(
    h: &HeatmapStack,
    camera: &CameraIntrinsics,
    rotated: &[Vector3<f64>],
    translation: &Vector3<f64>,
) -> Option<f64> {
    let mut sum = 0.0;
    for (i, k) in rotated.iter().enumerate() {
        let p = camera.project(&(k + translation))?;
        sum += h.log_at(i, p.x, p.y);
    }
    Some(sum)
}

#[inline]
fn finish(sum: Option<f64>, n: usize, floor: f64, mode: Approximation) -> f64 {
    let sum = sum.unwrap_or(n as f64 * floor);
    match mode {
        Approximation::Coupled => sum / n as f64,
        Approximation::Independent => sum,
    }
}

/// Log of the unnormalized pose likelihood: the mean (coupled) or the sum
/// (independent) of the keypoints' heatmap log probabilities. A pose with a
/// keypoint behind the camera scores as if every lookup hit the floor.
pub fn unnormalized_log_likelihood(
    h: &HeatmapStack,
    keypoints: &KeypointSet,
    pose: &Pose,
    camera: &CameraIntrinsics,
    mode: Approximation,
) -> Result<f64> {
    check_channels(h, keypoints)?;
    let rotated: Vec<_> = keypoints
        .points()
        .iter()
        .map(|k| pose.rotation.rotate(k))
        .collect();
    let sum = summed_log_lookup(h, camera, &rotated, &pose.translation);
    Ok(finish(sum, keypoints.len(), h.log_floor(), mode))
}

/// Probability masses over rotation x translation samples.
#[derive(Debug, Clone)]
pub struct PoseDistribution {
    rotation_grid: Arc<RotationGrid>,
    translation_grid: TranslationGrid,
    // row-major: rotation i, translation j at i * T + j
    masses: Vec<f64>,
    approximation: Approximation,
    log_normalizer: f64,
}

impl PoseDistribution {
    pub fn rotation_grid(&self) -> &Arc<RotationGrid> {
        &self.rotation_grid
    }

    pub fn translation_grid(&self) -> &TranslationGrid {
        &self.translation_grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, rotation: usize, translation: usize) -> f64 {
        self.masses[rotation * self.translation_grid.len() + translation]
    }

    pub fn approximation(&self) -> Approximation {
        self.approximation
    }

    /// Log of the normalizing sum of unnormalized likelihoods.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// Most probable (rotation, translation) cell; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax(&self.masses);
        let t = self.translation_grid.len();
        (i / t, i % t)
    }

    /// Writes the KPPD binary: `KPPD`, u32 version, u32 M, u32 T, then M*T
    /// little-endian f64 masses, rotation-major.
    pub fn encode<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"KPPD")?;
        for v in [
            1u32,
            self.rotation_grid.len() as u32,
            self.translation_grid.len() as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.masses.len() * 8);
        for m in &self.masses {
            buf.extend_from_slice(&m.to_le_bytes());
        }
        out.write_all(&buf)
    }
}

/// Raw contents of a KPPD file.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMasses {
    pub rotations: usize,
    pub translations: usize,
    pub masses: Vec<f64>,
}

pub fn decode_pose_masses<R: Read>(mut input: R) -> Result<PoseMasses> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    if bytes.len() < 16 || &bytes[0..4] != b"KPPD" {
        return Err(Error::Format("not a KPPD file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != 1 {
        return Err(Error::Format(format!("unsupported version {}", word(1))));
    }
    let (m, t) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 8 * m * t {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {}",
            bytes.len() - 16,
            8 * m * t
        )));
    }
    let masses = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(PoseMasses {
        rotations: m,
        translations: t,
        masses,
    })
}

const SUM_BLOCK: usize = 4096;

/// Evaluates the likelihood at every (rotation, translation) pair and
/// normalizes the result with a max-shifted log-sum-exp.
///
/// Runs on the current rayon pool. Each cell is computed independently and
/// the normalizing sum is reduced over fixed blocks in a fixed order, so the
/// output does not depend on the number of worker threads.
pub fn evaluate_grid(
    h: &HeatmapStack,
    keypoints: &KeypointSet,
    rotation_grid: &Arc<RotationGrid>,
    translation_grid: &TranslationGrid,
    camera: &CameraIntrinsics,
    mode: Approximation,
) -> Result<PoseDistribution> {
    check_channels(h, keypoints)?;
    if rotation_grid.is_empty() {
        return Err(Error::InvalidArgument("rotation grid is empty".into()));
    }
    let n = keypoints.len();
    let t = translation_grid.len();
    let translations: Vec<_> = (0..t).map(|j| translation_grid.translation(j)).collect();
    let floor = h.log_floor();

    let mut values = vec![0.0; rotation_grid.len() * t];
    let behind: usize = values
        .par_chunks_mut(t)
        .zip(rotation_grid.rotations().par_iter())
        .map_init(
            || Vec::with_capacity(n),
            |rotated, (row, rotation)| {
                rotated.clear();
                rotated.extend(keypoints.points().iter().map(|k| rotation.rotate(k)));
                let mut behind = 0;
                for (out, tr) in row.iter_mut().zip(&translations) {
                    let sum = summed_log_lookup(h, camera, rotated, tr);
                    behind += sum.is_none() as usize;
                    *out = finish(sum, n, floor, mode);
                }
                behind
            },
        )
        .sum();
    if behind == values.len() {
        return Err(Error::Degenerate(
            "every pose in the grid places a keypoint behind the camera".into(),
        ));
    }

    let log_normalizer = normalize_log_values(&mut values)?;
    Ok(PoseDistribution {
        rotation_grid: Arc::clone(rotation_grid),
        translation_grid: translation_grid.clone(),
        masses: values,
        approximation: mode,
        log_normalizer,
    })
}

/// Replaces log values by normalized probabilities in place and returns the
/// log of the normalizing constant.
fn normalize_log_values(values: &mut [f64]) -> Result<f64> {
    let max = values
        .par_iter()
        .copied()
        .reduce(|| f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(format!(
            "maximum log likelihood is {max}"
        )));
    }
    let partials: Vec<f64> = values
        .par_chunks_mut(SUM_BLOCK)
        .map(|block| {
            let mut s = 0.0;
            for v in block.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            s
        })
        .collect();
    let total: f64 = partials.iter().sum();
    let inv = 1.0 / total;
    values.par_iter_mut().for_each(|v| *v *= inv);
    Ok(max + total.ln())
}

/// Probability masses over the rotation grid.
#[derive(Debug, Clone)]
pub struct RotationDistribution {
    rotation_grid: Arc<RotationGrid>,
    masses: Vec<f64>,
}

impl RotationDistribution {
    /// Masses must match the grid, be non-negative and sum to one within 1e-9.
    pub fn new(rotation_grid: Arc<RotationGrid>, masses: Vec<f64>) -> Result<Self> {
        check_masses(&rotation_grid, &masses)?;
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("masses sum to {sum}")));
        }
        Ok(RotationDistribution {
            rotation_grid,
            masses,
        })
    }

    pub fn from_unnormalized(
        rotation_grid: Arc<RotationGrid>,
        mut masses: Vec<f64>,
    ) -> Result<Self> {
        check_masses(&rotation_grid, &masses)?;
        let sum: f64 = masses.iter().sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(Error::Degenerate("distribution has no mass".into()));
        }
        masses.iter_mut().for_each(|m| *m /= sum);
        Ok(RotationDistribution {
            rotation_grid,
            masses,
        })
    }

    pub fn uniform(rotation_grid: Arc<RotationGrid>) -> Self {
        let m = rotation_grid.len();
        RotationDistribution {
            rotation_grid,
            masses: vec![1.0 / m as f64; m],
        }
    }

    pub fn rotation_grid(&self) -> &Arc<RotationGrid> {
        &self.rotation_grid
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.masses[i]
    }

    /// Density with respect to the Haar measure of total volume `pi^2`.
    pub fn density(&self, i: usize) -> f64 {
        self.masses[i] / self.rotation_grid.cell_volume()
    }

    /// Log density; zero masses are clamped to the smallest positive float.
    pub fn log_density(&self, i: usize) -> f64 {
        (self.masses[i].max(f64::MIN_POSITIVE) / self.rotation_grid.cell_volume()).ln()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.masses)
    }

    /// Writes `index,w,x,y,z,mass,log_density` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for (i, r) in self.rotation_grid.rotations().iter().enumerate() {
            let [w, x, y, z] = r.wxyz();
            writeln!(
                out,
                "{i},{w:.16e},{x:.16e},{y:.16e},{z:.16e},{:.16e},{:.16e}",
                self.masses[i],
                self.log_density(i)
            )?;
        }
        Ok(())
    }

    /// Reads masses from a CSV written by [`RotationDistribution::write_csv`];
    /// the grid must match the row count.
    pub fn read_csv<R: Read>(rotation_grid: Arc<RotationGrid>, input: R) -> Result<Self> {
        use std::io::BufRead;
        let mut masses = vec![f64::NAN; rotation_grid.len()];
        for (n, line) in std::io::BufReader::new(input).lines().enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if n == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(Error::Format(format!(
                        "unexpected header {:?}",
                        line.trim()
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<_> = line.split(',').collect();
            let parse = || -> Option<(usize, f64)> {
                Some((
                    fields.first()?.trim().parse().ok()?,
                    fields.get(5)?.trim().parse().ok()?,
                ))
            };
            let (i, m) =
                parse().ok_or_else(|| Error::Format(format!("line {}: malformed row", n + 1)))?;
            *masses.get_mut(i).ok_or_else(|| {
                Error::Format(format!("line {}: index {i} outside grid", n + 1))
            })? = m;
        }
        if masses.iter().any(|m| m.is_nan()) {
            return Err(Error::Format(format!(
                "distribution does not cover all {} grid cells",
                rotation_grid.len()
            )));
        }
        Self::from_unnormalized(rotation_grid, masses)
    }
}

const CSV_HEADER: &str = "index,w,x,y,z,mass,log_density";

fn check_masses(grid: &RotationGrid, masses: &[f64]) -> Result<()> {
    if masses.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} masses for a grid of {}",
            masses.len(),
            grid.len()
        )));
    }
    if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::InvalidArgument(
            "masses must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Sums the translation samples out of a pose distribution.
pub fn marginalize_rotation(pd: &PoseDistribution) -> RotationDistribution {
    let masses = pd
        .masses
        .chunks_exact(pd.translation_grid.len())
        .map(|row| row.iter().sum())
        .collect();
    RotationDistribution {
        rotation_grid: Arc::clone(&pd.rotation_grid),
        masses,
    }
}

/// Log density of the grid sample closest to `gt`.
pub fn log_likelihood_of(rd: &RotationDistribution, gt: &Rotation) -> f64 {
    let (i, _) = nearest_sample(&rd.rotation_grid, gt);
    rd.log_density(i)
}

/// Largest achievable score at a recursion: all mass in one cell, `ln(M / pi^2)`.
pub fn log_likelihood_upper_bound(grid_size: usize) -> f64 {
    (grid_size as f64 / (PI * PI)).ln()
}

/// Score of the uniform distribution on SO(3), `ln(1 / pi^2)`.
pub fn uniform_log_likelihood() -> f64 {
    -(PI * PI).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanLogLikelihood {
    pub per_object: Vec<(String, f64)>,
    /// Unweighted mean of the per-object means.
    pub overall: f64,
}

/// Per-object mean scores and their unweighted average.
pub fn mean_log_likelihood<S: AsRef<str>>(groups: &[(S, Vec<f64>)]) -> Result<MeanLogLikelihood> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no objects to score".into()));
    }
    let per_object = groups
        .iter()
        .map(|(name, scores)| {
            if scores.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "object `{}` has no scores",
                    name.as_ref()
                )));
            }
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            Ok((name.as_ref().to_string(), mean))
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = per_object.iter().map(|(_, m)| m).sum::<f64>() / per_object.len() as f64;
    Ok(MeanLogLikelihood {
        per_object,
        overall,
    })
}

/// Shannon entropy in nats.
pub fn entropy(masses: &[f64]) -> f64 {
    -masses
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| m * m.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// Grid index of the peak cell.
    pub index: usize,
    pub rotation: Rotation,
    /// Mass of the unclaimed cells within the mode radius of the peak.
    pub mass: f64,
}

/// Peaks below this fraction of the global maximum are not reported as modes.
pub const DEFAULT_MIN_PEAK_RATIO: f64 = 0.05;

/// Greedy mode extraction with [`DEFAULT_MIN_PEAK_RATIO`].
pub fn mode_masses(rd: &RotationDistribution, radius: f64) -> Vec<Mode> {
    mode_masses_with(rd, radius, DEFAULT_MIN_PEAK_RATIO)
}

/// Repeatedly takes the heaviest unclaimed cell as a mode and claims every
/// unclaimed cell within geodesic `radius` of it. Stops once the heaviest
/// unclaimed cell falls below `min_peak_ratio` times the global maximum.
pub fn mode_masses_with(rd: &RotationDistribution, radius: f64, min_peak_ratio: f64) -> Vec<Mode> {
    let grid = &rd.rotation_grid;
    let mut order: Vec<usize> = (0..rd.masses.len()).collect();
    order.sort_by(|&a, &b| rd.masses[b].total_cmp(&rd.masses[a]).then(a.cmp(&b)));
    let peak = rd.masses[order[0]];
    let mut claimed = vec![false; rd.masses.len()];
    let mut modes = Vec::new();
    for &center in &order {
        if claimed[center] {
            continue;
        }
        if rd.masses[center] < min_peak_ratio * peak || rd.masses[center] == 0.0 {
            break;
        }
        let c = grid.get(center);
        let mut mass = 0.0;
        for (k, r) in grid.rotations().iter().enumerate() {
            if !claimed[k] && geodesic_distance(&c, r) <= radius {
                claimed[k] = true;
                mass += rd.masses[k];
            }
        }
        modes.push(Mode {
            index: center,
            rotation: c,
            mass,
        });
    }
    modes
}

/// Twice the Monte-Carlo covering radius of the grid (fixed seed).
pub fn default_mode_radius(grid: &RotationGrid) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    2.0 * covering_radius_estimate(grid, 20_000, &mut rng)
}
