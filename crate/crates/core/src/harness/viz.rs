//! Mollweide visualization of rotation distributions.
//!
//! A rotation `R` is drawn at the direction `d = R e_x` of the object's
//! x-axis in the camera frame (longitude `a`, latitude `b`), colored by the
//! tilt `c` about that axis. Zero tilt is the frame whose z-axis is the
//! camera z-axis with its component along `d` removed (the camera x-axis is
//! used instead when `d` is parallel to the camera z-axis).

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use nalgebra::Vector3;
use serde::Serialize;

use crate::distribution::RotationDistribution;
use crate::rotation_grid::Rotation;

pub const CONVENTION: &str = "a, b: longitude and latitude of R*e_x in the camera frame; \
c: angle about R*e_x from the reference to R*e_z, where the reference is the camera z-axis \
(or x-axis when parallel) made orthogonal to R*e_x";

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VizRecord {
    pub index: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub x: f64,
    pub y: f64,
}

/// `(a, b, c)` of a rotation under the canonical-axis convention.
pub fn canonical_angles(rotation: &Rotation) -> (f64, f64, f64) {
    let d = rotation.rotate(&Vector3::x());
    let a = d.y.atan2(d.x);
    let b = d.z.clamp(-1.0, 1.0).asin();
    let reference = [Vector3::z(), Vector3::x()]
        .into_iter()
        .map(|axis| axis - d * d.dot(&axis))
        .find(|u| u.norm() > 1e-9)
        .expect("two orthogonal axes cannot both be parallel to d")
        .normalize();
    let z_obj = rotation.rotate(&Vector3::z());
    let c = reference.cross(&z_obj).dot(&d).atan2(reference.dot(&z_obj));
    (a, b, c)
}

/// Auxiliary Mollweide angle: solves `2t + sin 2t = pi sin b` by Newton
/// iteration.
pub fn mollweide_theta(b: f64) -> f64 {
    if (b.abs() - PI / 2.0).abs() < 1e-12 {
        return b.signum() * PI / 2.0;
    }
    let target = PI * b.sin();
    let mut t = b;
    for _ in 0..NEWTON_MAX_ITER {
        let f = 2.0 * t + (2.0 * t).sin() - target;
        let df = 2.0 + 2.0 * (2.0 * t).cos();
        if df == 0.0 {
            break;
        }
        let step = f / df;
        t -= step;
        if step.abs() < NEWTON_TOL {
            break;
        }
    }
    t
}

/// Mollweide forward projection of longitude `a` and latitude `b`.
pub fn mollweide(a: f64, b: f64) -> (f64, f64) {
    let t = mollweide_theta(b);
    if t.abs() == PI / 2.0 {
        // cos(pi/2) is not exactly zero in floating point
        return (0.0, SQRT_2 * t.signum());
    }
    (2.0 * SQRT_2 / PI * a * t.cos(), SQRT_2 * t.sin())
}

pub fn viz_record(index: usize, rotation: &Rotation, alpha: f64) -> VizRecord {
    let (a, b, c) = canonical_angles(rotation);
    let (x, y) = mollweide(a, b);
    VizRecord {
        index,
        a,
        b,
        c,
        alpha,
        x,
        y,
    }
}

/// One record per grid rotation whose `mass / max_mass` is at least
/// `min_alpha`, in grid order.
pub fn viz_records(rd: &RotationDistribution, min_alpha: f64) -> Vec<VizRecord> {
    let grid = rd.rotation_grid();
    let max = rd.masses()[rd.argmax()];
    rd.masses()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| {
            let alpha = if max > 0.0 { m / max } else { 0.0 };
            (alpha >= min_alpha).then(|| viz_record(i, &grid.get(i), alpha))
        })
        .collect()
}

pub fn write_records_csv<W: Write>(mut out: W, records: &[VizRecord]) -> std::io::Result<()> {
    writeln!(out, "index,a,b,c,alpha,x,y")?;
    for r in records {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.index, r.a, r.b, r.c, r.alpha, r.x, r.y
        )?;
    }
    Ok(())
}

/// RGB raster over white.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pixels: Vec<[f64; 3]>,
}

const OUTLINE: [f64; 3] = [0.6, 0.6, 0.6];

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            pixels: vec![[1.0; 3]; width * height],
        }
    }

    /// Mollweide plane to pixel coordinates; the full ellipse spans the image.
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let px = (x / (2.0 * SQRT_2) + 1.0) * 0.5 * self.width as f64;
        let py = (1.0 - y / SQRT_2) * 0.5 * self.height as f64;
        (px, py)
    }

    fn blend(&mut self, u: isize, v: isize, color: [f64; 3], alpha: f64) {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            return;
        }
        let p = &mut self.pixels[v as usize * self.width + u as usize];
        for k in 0..3 {
            p[k] = alpha * color[k] + (1.0 - alpha) * p[k];
        }
    }

    fn draw_outline(&mut self) {
        let steps = 4 * (self.width + self.height);
        for i in 0..steps {
            let phi = 2.0 * PI * i as f64 / steps as f64;
            let (px, py) = self.to_pixel(2.0 * SQRT_2 * phi.cos(), SQRT_2 * phi.sin());
            self.blend(px.floor() as isize, py.floor() as isize, OUTLINE, 1.0);
        }
    }

    fn draw_disc(&mut self, x: f64, y: f64, radius: f64, color: [f64; 3], alpha: f64) {
        let (cx, cy) = self.to_pixel(x, y);
        let r = radius.ceil() as isize;
        let (u0, v0) = (cx.floor() as isize, cy.floor() as isize);
        for dv in -r..=r {
            for du in -r..=r {
                let (u, v) = (u0 + du, v0 + dv);
                let (dx, dy) = (u as f64 + 0.5 - cx, v as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    self.blend(u, v, color, alpha);
                }
            }
        }
    }

    fn draw_cross(&mut self, x: f64, y: f64, half: isize) {
        let (cx, cy) = self.to_pixel(x, y);
        let (u0, v0) = (cx.floor() as isize, cy.floor() as isize);
        for k in -half..=half {
            for w in 0..2 {
                self.blend(u0 + k + w, v0 + k, [0.0; 3], 1.0);
                self.blend(u0 + k + w, v0 - k, [0.0; 3], 1.0);
            }
        }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        out.write_all(&bytes)
    }
}

/// Fully saturated color for hue `h` in turns.
pub fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Draws the records, lightest first, and marks `gt` with a cross.
pub fn render(records: &[VizRecord], gt: Option<&Rotation>, width: usize, height: usize) -> Raster {
    let mut raster = Raster::new(width, height);
    raster.draw_outline();
    let mut order: Vec<&VizRecord> = records.iter().collect();
    order.sort_by(|p, q| p.alpha.total_cmp(&q.alpha).then(p.index.cmp(&q.index)));
    for r in order {
        let color = hue_to_rgb((r.c + PI) / (2.0 * PI));
        raster.draw_disc(r.x, r.y, 2.5, color, r.alpha);
    }
    if let Some(gt) = gt {
        let rec = viz_record(0, gt, 1.0);
        raster.draw_cross(rec.x, rec.y, 6);
    }
    raster
}
