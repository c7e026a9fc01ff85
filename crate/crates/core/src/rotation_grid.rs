//! Equivolumetric sampling of SO(3).
//!
//! The grid follows the Hopf-fibration construction: a rotation is split into a
//! point on the 2-sphere and a tilt angle on the circle fibre above it. The
//! sphere is pixelized with HEALPix (ring scheme, equal-area pixels) and the
//! tilt circle with `6 * 2^s` equal arcs, so every product cell has the same
//! Haar volume `pi^2 / M` with `M = 72 * 8^s`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::Write;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A rotation stored as a unit quaternion with its sign canonicalized
/// (first non-zero component of `w, x, y, z` positive), so `q` and `-q`
/// have a single representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let raw = Quaternion::new(w, x, y, z);
        let norm = raw.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::from_unit(UnitQuaternion::from_quaternion(raw)))
    }

    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        Rotation {
            q: canonical_sign(q),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        match nalgebra::Unit::try_new(*axis, 1e-15) {
            Some(axis) => Self::from_unit(UnitQuaternion::from_axis_angle(&axis, angle)),
            None => Self::identity(),
        }
    }

    /// Rotation with Hopf coordinates `(theta, phi)` on the sphere and tilt `psi`.
    pub fn from_hopf(theta: f64, phi: f64, psi: f64) -> Self {
        let (sh, ch) = (0.5 * theta).sin_cos();
        let (sp, cp) = (0.5 * psi).sin_cos();
        let (sg, cg) = (phi + 0.5 * psi).sin_cos();
        let q = Quaternion::new(ch * cp, ch * sp, sh * cg, sh * sg);
        Self::from_unit(UnitQuaternion::new_unchecked(q))
    }

    /// Inverse of [`Rotation::from_hopf`]: `theta` in `[0, pi]`, `phi` and `psi`
    /// in `[0, 2pi)`.
    pub fn hopf_coordinates(&self) -> (f64, f64, f64) {
        let [w, x, y, z] = self.wxyz();
        let theta = 2.0 * (y * y + z * z).sqrt().atan2((w * w + x * x).sqrt());
        let half_psi = x.atan2(w);
        let psi = wrap_angle(2.0 * half_psi);
        let phi = wrap_angle(z.atan2(y) - half_psi);
        (theta, phi, psi)
    }

    /// Haar-uniform random rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            if let Ok(r) = Self::from_wxyz(w, x, y, z) {
                return r;
            }
        }
    }

    /// Canonical components `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        *self.q.to_rotation_matrix().matrix()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q.transform_vector(v)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_unit(self.q * other.q)
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit(self.q.inverse())
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        geodesic_distance(&Rotation::identity(), self)
    }

    #[inline]
    fn dot(&self, other: &Rotation) -> f64 {
        let a = self.q.quaternion();
        let b = other.q.quaternion();
        a.w * b.w + a.i * b.i + a.j * b.j + a.k * b.k
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical_sign(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion();
    let negate = [c.w, c.i, c.j, c.k]
        .into_iter()
        .find(|v| *v != 0.0)
        .is_some_and(|v| v < 0.0);
    if negate {
        UnitQuaternion::new_unchecked(-c)
    } else {
        q
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Angle of the relative rotation between `a` and `b`, in `[0, pi]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    distance_from_dot(a.dot(b))
}

#[inline]
fn distance_from_dot(dot: f64) -> f64 {
    (2.0 * dot * dot - 1.0).clamp(-1.0, 1.0).acos()
}

/// HEALPix ring-scheme pixel centers.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    nside: u32,
    centers: Vec<Vector3<f64>>,
    // (colatitude, longitude) per pixel, kept to avoid re-deriving from the
    // unit vectors
    angles: Vec<(f64, f64)>,
}

impl SphereGrid {
    pub fn nside(&self) -> u32 {
        self.nside
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vector3<f64>] {
        &self.centers
    }

    /// Colatitude and longitude of pixel `index`.
    pub fn angles(&self, index: usize) -> (f64, f64) {
        self.angles[index]
    }

    /// Index of the pixel containing `direction` (need not be normalized).
    pub fn pixel_of(&self, direction: &Vector3<f64>) -> usize {
        let n = direction.norm();
        let z = (direction.z / n).clamp(-1.0, 1.0);
        let phi = direction.y.atan2(direction.x);
        ring_pixel(self.nside, z, phi)
    }
}

/// Builds the `12 * nside^2` ring-ordered pixel centers.
pub fn healpix_centers(nside: u32) -> Result<SphereGrid> {
    if nside == 0 || !nside.is_power_of_two() {
        return Err(Error::InvalidNside(nside));
    }
    let n = nside as usize;
    let nf = nside as f64;
    let npix = 12 * n * n;
    let mut angles = Vec::with_capacity(npix);

    for ring in 1..4 * n {
        if ring < n {
            let i = ring as f64;
            let z = 1.0 - i * i / (3.0 * nf * nf);
            push_ring(&mut angles, z, 4 * ring, PI / (2.0 * i), 0.5);
        } else if ring <= 3 * n {
            let z = 4.0 / 3.0 - 2.0 * ring as f64 / (3.0 * nf);
            // rings alternate between a half-step phase and a first pixel at
            // longitude zero, starting with a half step at the cap boundary
            let shift = if (ring - n).is_multiple_of(2) {
                0.5
            } else {
                1.0
            };
            push_ring(&mut angles, z, 4 * n, PI / (2.0 * nf), shift);
        } else {
            let mirrored = 4 * n - ring;
            let i = mirrored as f64;
            let z = -(1.0 - i * i / (3.0 * nf * nf));
            push_ring(&mut angles, z, 4 * mirrored, PI / (2.0 * i), 0.5);
        }
    }
    debug_assert_eq!(angles.len(), npix);

    let centers = angles
        .iter()
        .map(|&(theta, phi): &(f64, f64)| {
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            Vector3::new(st * cp, st * sp, ct)
        })
        .collect();
    Ok(SphereGrid {
        nside,
        centers,
        angles,
    })
}

fn push_ring(out: &mut Vec<(f64, f64)>, z: f64, count: usize, step: f64, shift: f64) {
    let theta = z.clamp(-1.0, 1.0).acos();
    for j in 1..=count {
        out.push((theta, step * (j as f64 - shift)));
    }
}

/// Ring-scheme pixel index of the point with cosine colatitude `z` and
/// longitude `phi`.
pub fn ring_pixel(nside: u32, z: f64, phi: f64) -> usize {
    let n = nside as i64;
    let nf = nside as f64;
    let za = z.abs();
    let tt = wrap_angle(phi) / FRAC_PI_2;

    if za <= 2.0 / 3.0 {
        let t1 = nf * (0.5 + tt);
        let t2 = nf * z * 0.75;
        let jp = (t1 - t2).floor() as i64;
        let jm = (t1 + t2).floor() as i64;
        let ir = n + 1 + jp - jm;
        let kshift = 1 - (ir & 1);
        let ip = ((jp + jm - n + kshift + 1) / 2).rem_euclid(4 * n);
        let ncap = 2 * n * (n - 1);
        (ncap + (ir - 1) * 4 * n + ip) as usize
    } else {
        let tp = tt - tt.floor();
        let tmp = nf * (3.0 * (1.0 - za)).sqrt();
        let jp = (tp * tmp).floor() as i64;
        let jm = ((1.0 - tp) * tmp).floor() as i64;
        let ir = jp + jm + 1;
        let ip = ((tt * ir as f64).floor() as i64).rem_euclid(4 * ir);
        if z > 0.0 {
            (2 * ir * (ir - 1) + ip) as usize
        } else {
            (12 * n * n - 2 * ir * (ir + 1) + ip) as usize
        }
    }
}

/// Equivolumetric SO(3) grid at a given recursion level.
///
/// Sample `pixel * tilts + j` sits at the center of sphere pixel `pixel`
/// with tilt `2pi (j + 1/2) / tilts`.
#[derive(Debug, Clone)]
pub struct RotationGrid {
    recursion: u32,
    sphere: SphereGrid,
    tilts: usize,
    rotations: Vec<Rotation>,
}

/// Number of samples in the grid at recursion `s`.
pub fn grid_size(recursion: u32) -> usize {
    72 * 8usize.pow(recursion)
}

/// Builds the grid with `72 * 8^recursion` samples.
pub fn build_rotation_grid(recursion: u32) -> Result<RotationGrid> {
    if recursion > 8 {
        return Err(Error::InvalidArgument(format!(
            "recursion {recursion} would need {} samples",
            grid_size(recursion)
        )));
    }
    let sphere = healpix_centers(1 << recursion)?;
    let tilts = 6usize << recursion;
    let mut rotations = Vec::with_capacity(sphere.len() * tilts);
    for &(theta, phi) in &sphere.angles {
        for j in 0..tilts {
            let psi = TAU * (j as f64 + 0.5) / tilts as f64;
            rotations.push(Rotation::from_hopf(theta, phi, psi));
        }
    }
    Ok(RotationGrid {
        recursion,
        sphere,
        tilts,
        rotations,
    })
}

impl RotationGrid {
    pub fn recursion(&self) -> u32 {
        self.recursion
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn get(&self, index: usize) -> Rotation {
        self.rotations[index]
    }

    pub fn sphere(&self) -> &SphereGrid {
        &self.sphere
    }

    pub fn tilt_count(&self) -> usize {
        self.tilts
    }

    /// Haar volume of one cell, `pi^2 / M`.
    pub fn cell_volume(&self) -> f64 {
        PI * PI / self.len() as f64
    }

    /// Index of the fibration cell containing `rotation`: the sphere pixel of
    /// its Hopf base point combined with its tilt arc.
    pub fn cell_of(&self, rotation: &Rotation) -> usize {
        let (theta, phi, psi) = rotation.hopf_coordinates();
        let pixel = ring_pixel(self.sphere.nside, theta.cos(), phi);
        let j = ((psi / TAU * self.tilts as f64).floor() as usize).min(self.tilts - 1);
        pixel * self.tilts + j
    }

    /// Writes `index,w,x,y,z` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,w,x,y,z")?;
        for (i, r) in self.rotations.iter().enumerate() {
            let [w, x, y, z] = r.wxyz();
            writeln!(out, "{i},{w:.16e},{x:.16e},{y:.16e},{z:.16e}")?;
        }
        Ok(())
    }
}

/// Exhaustive nearest grid sample; ties go to the lowest index.
pub fn nearest_sample(grid: &RotationGrid, query: &Rotation) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, r) in grid.rotations.iter().enumerate() {
        let d = r.dot(query).abs();
        if d > best.1 {
            best = (i, d);
        }
    }
    (best.0, distance_from_dot(best.1))
}

/// k-d tree over the grid quaternions (both signs) for bulk nearest-sample
/// queries. Returns the same answers as [`nearest_sample`].
#[derive(Debug, Clone)]
pub struct RotationIndex {
    points: Vec<([f64; 4], u32)>,
    split_axis: Vec<u8>,
}

const LEAF_SIZE: usize = 8;

impl RotationIndex {
    pub fn new(grid: &RotationGrid) -> Self {
        let mut points = Vec::with_capacity(2 * grid.len());
        for (i, r) in grid.rotations.iter().enumerate() {
            let q = r.wxyz();
            points.push((q, i as u32));
            points.push((q.map(|v| -v), i as u32));
        }
        let mut split_axis = vec![0u8; points.len()];
        build_tree(&mut points, &mut split_axis);
        RotationIndex { points, split_axis }
    }

    pub fn nearest(&self, query: &Rotation) -> (usize, f64) {
        let q = query.wxyz();
        let mut best = (u32::MAX, f64::NEG_INFINITY);
        self.search(&q, 0, self.points.len(), &mut best);
        (best.0 as usize, distance_from_dot(best.1))
    }

    fn search(&self, q: &[f64; 4], lo: usize, hi: usize, best: &mut (u32, f64)) {
        if hi - lo <= LEAF_SIZE {
            for p in &self.points[lo..hi] {
                self.consider(q, p, best);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.split_axis[mid] as usize;
        let diff = q[axis] - self.points[mid].0[axis];
        self.consider(q, &self.points[mid], best);
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, first.0, first.1, best);
        // squared chord length to the best candidate, padded for rounding
        let bound = 2.0 - 2.0 * best.1 + 1e-12;
        if diff * diff <= bound {
            self.search(q, second.0, second.1, best);
        }
    }

    #[inline]
    fn consider(&self, q: &[f64; 4], p: &([f64; 4], u32), best: &mut (u32, f64)) {
        let g = &p.0;
        // same operand order as Rotation::dot so ties resolve identically
        let d = (g[0] * q[0] + g[1] * q[1] + g[2] * q[2] + g[3] * q[3]).abs();
        if d > best.1 || (d == best.1 && p.1 < best.0) {
            *best = (p.1, d);
        }
    }
}

fn build_tree(points: &mut [([f64; 4], u32)], axes: &mut [u8]) {
    if points.len() <= LEAF_SIZE {
        return;
    }
    let mut axis = 0;
    let mut widest = f64::NEG_INFINITY;
    for a in 0..4 {
        let (mn, mx) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| {
                (acc.0.min(p.0[a]), acc.1.max(p.0[a]))
            });
        if mx - mn > widest {
            widest = mx - mn;
            axis = a;
        }
    }
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
    axes[mid] = axis as u8;
    let (left, right) = points.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build_tree(left, left_axes);
    build_tree(&mut right[1..], &mut right_axes[1..]);
}

/// Monte-Carlo estimate of the covering radius: the largest distance from
/// `samples` Haar-random rotations to their nearest grid sample.
pub fn covering_radius_estimate<R: Rng + ?Sized>(
    grid: &RotationGrid,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let index = RotationIndex::new(grid);
    (0..samples)
        .map(|_| index.nearest(&Rotation::random(rng)).1)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_pixelization_has_twelve_pixels() {
        let g = healpix_centers(1).unwrap();
        assert_eq!(g.len(), 12);
        let g = healpix_centers(8).unwrap();
        assert_eq!(g.len(), 768);
        for c in g.centers() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_nside() {
        assert!(matches!(healpix_centers(0), Err(Error::InvalidNside(0))));
        assert!(matches!(healpix_centers(3), Err(Error::InvalidNside(3))));
        assert!(matches!(healpix_centers(12), Err(Error::InvalidNside(12))));
    }

    #[test]
    fn centers_lie_in_their_own_pixel() {
        for nside in [1, 2, 4, 8, 16] {
            let g = healpix_centers(nside).unwrap();
            for (i, c) in g.centers().iter().enumerate() {
                assert_eq!(g.pixel_of(c), i, "nside {nside} pixel {i}");
            }
        }
    }

    #[test]
    fn ring_order_is_monotone() {
        let g = healpix_centers(4).unwrap();
        let mut prev_theta = -1.0;
        let mut prev_phi = -1.0;
        for i in 0..g.len() {
            let (theta, phi) = g.angles(i);
            if theta == prev_theta {
                assert!(phi > prev_phi);
            } else {
                assert!(theta > prev_theta);
            }
            prev_theta = theta;
            prev_phi = phi;
        }
    }

    #[test]
    fn grid_sizes_and_volumes() {
        assert_eq!(build_rotation_grid(0).unwrap().len(), 72);
        let g2 = build_rotation_grid(2).unwrap();
        assert_eq!(g2.len(), 4608);
        assert!((g2.cell_volume() - 2.1419e-3).abs() < 1e-7);
        let g3 = build_rotation_grid(3).unwrap();
        assert_eq!(g3.len(), 36864);
        assert_eq!(g3.cell_volume(), g2.cell_volume() / 8.0);
    }

    #[test]
    fn grid_samples_sit_in_their_own_cell() {
        let g = build_rotation_grid(2).unwrap();
        for (i, r) in g.rotations().iter().enumerate() {
            assert_eq!(g.cell_of(r), i);
        }
    }

    #[test]
    fn hopf_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = Rotation::random(&mut rng);
            let (t, p, s) = r.hopf_coordinates();
            let back = Rotation::from_hopf(t, p, s);
            assert!(geodesic_distance(&r, &back) < 1e-7);
        }
    }

    #[test]
    fn geodesic_examples() {
        let id = Rotation::identity();
        let half_turn = Rotation::from_axis_angle(&Vector3::z(), PI);
        assert_eq!(geodesic_distance(&id, &id), 0.0);
        assert!((geodesic_distance(&id, &half_turn) - PI).abs() < 1e-12);
        let q = Rotation::from_wxyz(0.3, -0.2, 0.9, 0.1).unwrap();
        let [w, x, y, z] = q.wxyz();
        let neg = Rotation::from_wxyz(-w, -x, -y, -z).unwrap();
        assert_eq!(q, neg);
        assert_eq!(geodesic_distance(&q, &neg), 0.0);
    }

    #[test]
    fn canonical_sign_prefers_positive_leading_component() {
        let r = Rotation::from_wxyz(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(r.wxyz()[0] > 0.0);
        let r = Rotation::from_wxyz(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(r.wxyz(), [0.0, 1.0, 0.0, 0.0]);
        let det = r.to_matrix().determinant();
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_of_grid_member_is_itself() {
        let g = build_rotation_grid(1).unwrap();
        assert_eq!(nearest_sample(&g, &g.get(17)), (17, 0.0));
        let index = RotationIndex::new(&g);
        assert_eq!(index.nearest(&g.get(17)), (17, 0.0));
    }

    #[test]
    fn indexed_nearest_matches_exhaustive() {
        let g = build_rotation_grid(2).unwrap();
        let index = RotationIndex::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let q = Rotation::random(&mut rng);
            assert_eq!(index.nearest(&q), nearest_sample(&g, &q));
        }
    }

    #[test]
    fn csv_export_format() {
        let g = build_rotation_grid(0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "index,w,x,y,z");
        assert_eq!(lines.len(), 73);
        let fields: Vec<_> = lines[1].split(',').collect();
        assert_eq!(fields[0], "0");
        let w: f64 = fields[1].parse().unwrap();
        assert!(w >= 0.0);
        assert_eq!(fields[1].split('e').next().unwrap().len(), 18);
    }
}
