//! Equirectangular panorama geometry.
//!
//! World frame: y up, right handed, +z is the forward direction at the
//! center of the map. Azimuth grows from +z towards +x.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::field::{ConeRay, Ray};
use crate::imgio::{Mask, Panorama, Pose};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Rotation quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v' = v + 2w (q x v) + 2 q x (q x v)
        let q = Vec3::new(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }
}

/// Azimuth in (-pi, pi], elevation in [-pi/2, pi/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphCoord {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Normalized equirectangular coordinates, `i` across columns and `j` down rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub i: f64,
    pub j: f64,
}

pub fn sph_to_pixel(s: SphCoord) -> PixelCoord {
    PixelCoord {
        i: s.azimuth / (2.0 * PI) + 0.5,
        j: (FRAC_PI_2 - s.elevation) / PI,
    }
}

pub fn pixel_to_sph(p: PixelCoord) -> SphCoord {
    SphCoord {
        azimuth: 2.0 * PI * (p.i - 0.5),
        elevation: PI * (0.5 - p.j),
    }
}

pub fn sph_to_dir(s: SphCoord) -> Vec3 {
    let (st, ct) = s.elevation.sin_cos();
    let (sp, cp) = s.azimuth.sin_cos();
    Vec3::new(ct * sp, st, ct * cp)
}

pub fn dir_to_sph(d: Vec3) -> SphCoord {
    let d = d.normalized();
    SphCoord {
        azimuth: d.x.atan2(d.z),
        elevation: d.y.clamp(-1.0, 1.0).asin(),
    }
}

pub fn pixel_to_dir(p: PixelCoord) -> Vec3 {
    sph_to_dir(pixel_to_sph(p))
}

pub fn dir_to_pixel(d: Vec3) -> PixelCoord {
    sph_to_pixel(dir_to_sph(d))
}

/// Normalized coordinate of the center of pixel `(x, y)`.
pub fn pixel_center(x: usize, y: usize, width: usize, height: usize) -> PixelCoord {
    PixelCoord {
        i: (x as f64 + 0.5) / width as f64,
        j: (y as f64 + 0.5) / height as f64,
    }
}

/// Solid angle of one pixel in row `j`, evaluated at the row center.
pub fn pixel_solid_angle(j: usize, width: usize, height: usize) -> f64 {
    let elevation = PI * (0.5 - (j as f64 + 0.5) / height as f64);
    (2.0 * PI / width as f64) * (PI / height as f64) * elevation.cos()
}

/// Exact solid angle of the cell in row `j` (band between its edge latitudes).
pub fn pixel_cell_solid_angle(j: usize, width: usize, height: usize) -> f64 {
    let top = PI * (0.5 - j as f64 / height as f64);
    let bottom = PI * (0.5 - (j + 1) as f64 / height as f64);
    (2.0 * PI / width as f64) * (top.sin() - bottom.sin())
}

/// Uniform direction on the sphere from two uniform variates in [0, 1).
///
/// `u` drives the azimuth, `beta` the polar angle through `acos(2 beta - 1)`.
pub fn sphere_from_uniform(u: f64, beta: f64) -> SphCoord {
    let azimuth = -PI + 2.0 * PI * u;
    let polar = (2.0 * beta - 1.0).clamp(-1.0, 1.0).acos();
    SphCoord {
        azimuth,
        elevation: FRAC_PI_2 - polar,
    }
}

pub fn sample_sphere_uniform(rng: &mut Rng) -> SphCoord {
    let u: f64 = rng.gen();
    let beta: f64 = rng.gen();
    sphere_from_uniform(u, beta)
}

/// Footprint growth rate of a pixel cone for a panorama of the given width.
pub fn pixel_radius_rate(width: usize) -> f64 {
    (2.0 * PI / width as f64) * 2.0 / 12f64.sqrt()
}

/// One ray per pixel center, row-major.
pub fn rays_for_pose(pose: &Pose, width: usize, height: usize) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let d = pixel_to_dir(pixel_center(x, y, width, height));
            rays.push(Ray::new(pose.position, pose.orientation.rotate(d)));
        }
    }
    rays
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Uniform over pixel coordinates (oversamples the poles).
    Planar,
    /// Uniform over the sphere of directions.
    Spherical,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(SamplingMode::Planar),
            "spherical" => Ok(SamplingMode::Spherical),
            other => Err(Error::invalid(format!("unknown sampling mode '{other}'"))),
        }
    }
}

pub const DEFAULT_BATCH_RAYS: usize = 1024;

/// Draw `n` supervised rays from one panorama. Masked pixels are never emitted.
pub fn sample_training_rays(
    pose: &Pose,
    pano: &Panorama,
    mask: Option<&Mask>,
    n: usize,
    rng: &mut Rng,
    mode: SamplingMode,
) -> Result<Vec<(ConeRay, [f32; 3])>> {
    let (w, h) = (pano.width(), pano.height());
    if let Some(m) = mask {
        if m.width() != w || m.height() != h {
            return Err(Error::dim("mask does not match panorama"));
        }
    }
    let excluded = |x: usize, y: usize| mask.map(|m| m.get(x, y)).unwrap_or(false);
    let open: Vec<usize> = (0..w * h).filter(|&k| !excluded(k % w, k / w)).collect();
    if open.is_empty() && n > 0 {
        return Err(Error::invalid("no sampleable pixels"));
    }
    let radius_rate = pixel_radius_rate(w);
    let make = |p: PixelCoord| {
        let d = pose.orientation.rotate(pixel_to_dir(p));
        ConeRay::new(Ray::new(pose.position, d), radius_rate)
    };

    let mut out = Vec::with_capacity(n);
    match mode {
        SamplingMode::Planar => {
            for _ in 0..n {
                let k = open[rng.gen_range(0..open.len())];
                let (x, y) = (k % w, k / w);
                out.push((make(pixel_center(x, y, w, h)), pano.get(x, y)));
            }
        }
        SamplingMode::Spherical => {
            let mut cell_sampler: Option<CellSampler> = None;
            for _ in 0..n {
                let mut chosen = None;
                for _ in 0..1000 {
                    let p = sph_to_pixel(sample_sphere_uniform(rng));
                    let (x, y) = nearest_pixel(p, w, h);
                    if !excluded(x, y) {
                        chosen = Some(p);
                        break;
                    }
                }
                // Very sparse masks: draw the cell by exact solid angle instead.
                let p = match chosen {
                    Some(p) => p,
                    None => cell_sampler
                        .get_or_insert_with(|| CellSampler::new(&open, w, h))
                        .sample(rng),
                };
                out.push((make(p), pano.sample_bilinear(p)));
            }
        }
    }
    Ok(out)
}

fn nearest_pixel(p: PixelCoord, w: usize, h: usize) -> (usize, usize) {
    let x = ((p.i * w as f64).floor() as i64).rem_euclid(w as i64) as usize;
    let y = ((p.j * h as f64).floor() as i64).clamp(0, h as i64 - 1) as usize;
    (x, y)
}

/// Uniform-on-sphere sampling restricted to a set of pixel cells.
struct CellSampler {
    cells: Vec<usize>,
    cdf: Vec<f64>,
    w: usize,
    h: usize,
}

impl CellSampler {
    fn new(open: &[usize], w: usize, h: usize) -> Self {
        let mut acc = 0.0;
        let cdf = open
            .iter()
            .map(|&k| {
                acc += pixel_cell_solid_angle(k / w, w, h);
                acc
            })
            .collect();
        CellSampler {
            cells: open.to_vec(),
            cdf,
            w,
            h,
        }
    }

    fn sample(&self, rng: &mut Rng) -> PixelCoord {
        let total = *self.cdf.last().unwrap();
        let u = rng.gen::<f64>() * total;
        let idx = self.cdf.partition_point(|&c| c <= u).min(self.cells.len() - 1);
        let k = self.cells[idx];
        let (x, y) = (k % self.w, k / self.w);
        let top = PI * (0.5 - y as f64 / self.h as f64);
        let bottom = PI * (0.5 - (y + 1) as f64 / self.h as f64);
        let s = bottom.sin() + rng.gen::<f64>() * (top.sin() - bottom.sin());
        let elevation = s.clamp(-1.0, 1.0).asin();
        let i = (x as f64 + rng.gen::<f64>()) / self.w as f64;
        PixelCoord {
            i,
            j: (FRAC_PI_2 - elevation) / PI,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn sph_to_pixel_examples() {
        let p = sph_to_pixel(SphCoord { azimuth: 0.0, elevation: 0.0 });
        assert_eq!((p.i, p.j), (0.5, 0.5));
        let p = sph_to_pixel(SphCoord { azimuth: FRAC_PI_2, elevation: 0.0 });
        assert_eq!((p.i, p.j), (0.75, 0.5));
        let p = sph_to_pixel(SphCoord { azimuth: 0.0, elevation: FRAC_PI_2 });
        assert_eq!((p.i, p.j), (0.5, 0.0));
    }

    #[test]
    fn pixel_to_dir_examples() {
        assert!(close(pixel_to_dir(PixelCoord { i: 0.5, j: 0.5 }), Vec3::new(0.0, 0.0, 1.0), 1e-12));
        assert!(close(pixel_to_dir(PixelCoord { i: 0.75, j: 0.5 }), Vec3::new(1.0, 0.0, 0.0), 1e-12));
        assert!(close(pixel_to_dir(PixelCoord { i: 0.5, j: 0.0 }), Vec3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn solid_angle_examples() {
        let equator = pixel_solid_angle(0, 4, 2);
        // W=4, H=2: row centers at +-pi/4, so check the formula directly at cos 0
        assert!(((2.0 * PI / 4.0) * (PI / 2.0) - PI * PI / 4.0).abs() < 1e-12);
        assert!(equator < PI * PI / 4.0);
        let total: f64 = (0..32).map(|j| 64.0 * pixel_solid_angle(j, 64, 32)).sum();
        assert!((total / (4.0 * PI) - 1.0).abs() < 1e-3);
        for h in [4usize, 8, 16] {
            assert!(pixel_solid_angle(0, 2 * h, h) < pixel_solid_angle(h / 2, 2 * h, h));
        }
    }

    #[test]
    fn sphere_sampling_examples() {
        assert!(sphere_from_uniform(0.3, 0.5).elevation.abs() < 1e-12);
        assert!((sphere_from_uniform(0.3, 1.0).elevation - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn rays_for_identity_and_rotated_pose() {
        let pose = Pose::identity("f0");
        let rays = rays_for_pose(&pose, 4, 2);
        assert!(rays.iter().all(|r| (r.direction.norm() - 1.0).abs() < 1e-12));
        // pixel (2, 1) is just below the forward axis; use the exact map center instead
        let c = pose.orientation.rotate(pixel_to_dir(PixelCoord { i: 0.5, j: 0.5 }));
        assert!(close(c, Vec3::new(0.0, 0.0, 1.0), 1e-12));

        let q = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), FRAC_PI_2);
        assert!(close(q.rotate(Vec3::new(0.0, 0.0, 1.0)), Vec3::new(1.0, 0.0, 0.0), 1e-12));
        let rotated = Pose::new("f1", Vec3::ZERO, q);
        let a = rays_for_pose(&pose, 8, 4);
        let b = rays_for_pose(&rotated, 8, 4);
        for (ra, rb) in a.iter().zip(&b) {
            assert!(close(q.rotate(ra.direction), rb.direction, 1e-12));
        }
    }

    #[test]
    fn single_open_pixel_is_repeated() {
        let pano = Panorama::from_fn(8, |x, y| [x as f32, y as f32, 1.0]);
        let mut mask = Mask::new(8, 4, vec![true; 32]).unwrap();
        mask.set(5, 2, false);
        for mode in [SamplingMode::Planar, SamplingMode::Spherical] {
            let mut rng = stream(1, Purpose::Misc, 0);
            let batch = sample_training_rays(&Pose::identity("a"), &pano, Some(&mask), 8, &mut rng, mode).unwrap();
            assert_eq!(batch.len(), 8);
            if mode == SamplingMode::Planar {
                for (ray, rgb) in &batch {
                    assert_eq!(*rgb, [5.0, 2.0, 1.0]);
                    assert_eq!(ray.ray.direction, batch[0].0.ray.direction);
                }
            } else {
                for (ray, _) in &batch {
                    let (x, y) = nearest_pixel(dir_to_pixel(ray.ray.direction), 8, 4);
                    assert_eq!((x, y), (5, 2));
                }
            }
        }
    }

    #[test]
    fn fully_masked_is_an_error() {
        let pano = Panorama::zeros(8);
        let mask = Mask::new(8, 4, vec![true; 32]).unwrap();
        let mut rng = stream(1, Purpose::Misc, 0);
        let err = sample_training_rays(&Pose::identity("a"), &pano, Some(&mask), 1, &mut rng, SamplingMode::Planar)
            .unwrap_err();
        assert!(err.to_string().contains("no sampleable pixels"));
        assert_eq!(DEFAULT_BATCH_RAYS, 1024);
    }

    #[test]
    fn spherical_mode_follows_cap_area() {
        // top row painted: spherical draws should hit it in proportion to its solid angle
        let (w, h) = (32, 16);
        let pano = Panorama::from_fn(w, |_, y| if y == 0 { [1.0; 3] } else { [0.0; 3] });
        let mut rng = stream(9, Purpose::Misc, 0);
        let n = 100_000;
        let batch = sample_training_rays(&Pose::identity("a"), &pano, None, n, &mut rng, SamplingMode::Spherical).unwrap();
        let hits = batch
            .iter()
            .filter(|(r, _)| nearest_pixel(dir_to_pixel(r.ray.direction), w, h).1 == 0)
            .count();
        let cap = w as f64 * pixel_cell_solid_angle(0, w, h) / (4.0 * PI);
        let freq = hits as f64 / n as f64;
        let sigma = (cap * (1.0 - cap) / n as f64).sqrt();
        assert!((freq - cap).abs() < 5.0 * sigma, "freq {freq} cap {cap}");
        // planar sampling would give 1/16
        assert!(freq < 0.5 / h as f64);
    }
}
