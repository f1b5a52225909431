//! Scene parameterization: the unit-sphere foreground/background split,
//! inverted-sphere background coordinates and (integrated) positional
//! encodings.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalized(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// A ray with a pixel footprint that grows linearly with distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeRay {
    pub ray: Ray,
    pub radius_rate: f64,
}

impl ConeRay {
    pub fn new(ray: Ray, radius_rate: f64) -> Self {
        ConeRay { ray, radius_rate }
    }
}

/// Background sample: unit direction from the origin and inverse radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgPoint {
    pub dir: Vec3,
    pub inv_radius: f64,
}

impl BgPoint {
    pub fn to_point(&self) -> Vec3 {
        self.dir / self.inv_radius
    }

    pub fn quad(&self) -> [f64; 4] {
        [self.dir.x, self.dir.y, self.dir.z, self.inv_radius]
    }
}

/// Encoding configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub levels: usize,
    pub identity: bool,
    pub integrated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub values: Vec<f64>,
    pub config: EncodingConfig,
}

/// Encoded length of a `dim`-dimensional input.
pub fn encoded_len(dim: usize, levels: usize, identity: bool) -> usize {
    dim * 2 * levels + if identity { dim } else { 0 }
}

pub const DEFAULT_POSITION_LEVELS: usize = 10;
pub const DEFAULT_DIRECTION_LEVELS: usize = 4;
/// Smallest inverse radius sampled in the background (far plane at r = 1000).
pub const DEFAULT_INV_RADIUS_FLOOR: f64 = 1e-3;

/// Distance along `ray` to the unit sphere, for an origin inside it.
pub fn sphere_exit_t(ray: &Ray) -> Result<f64> {
    let o = ray.origin;
    if o.norm() >= 1.0 {
        return Err(Error::invalid("ray origin outside the unit sphere"));
    }
    Ok(sphere_hit_t(ray, 1.0))
}

/// Distance along `ray` to the sphere of `radius` (origin strictly inside).
pub fn sphere_hit_t(ray: &Ray, radius: f64) -> f64 {
    let od = ray.origin.dot(ray.direction);
    let oo = ray.origin.dot(ray.origin);
    let disc = (od * od - oo + radius * radius).max(0.0);
    // numerically stable root: for od < 0 the plain form is fine, otherwise
    // use the conjugate to avoid cancellation
    if od <= 0.0 {
        -od + disc.sqrt()
    } else {
        (radius * radius - oo) / (od + disc.sqrt())
    }
}

pub fn bg_param(p: Vec3) -> Result<BgPoint> {
    let r = p.norm();
    if !(r > 1.0) {
        return Err(Error::invalid(format!("background point at radius {r} <= 1")));
    }
    Ok(BgPoint {
        dir: p / r,
        inv_radius: 1.0 / r,
    })
}

/// Foreground interval in `t` and background interval in inverse radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPartition {
    pub fg: (f64, f64),
    /// `(near, far)` inverse radii; near is 1, far is the floor.
    pub bg: (f64, f64),
}

pub fn partition_ray(ray: &Ray, t_near: f64, inv_radius_floor: f64) -> Result<RayPartition> {
    let t_sphere = sphere_exit_t(ray)?;
    if t_near >= t_sphere {
        return Err(Error::invalid(format!(
            "t_near {t_near} is beyond the sphere exit {t_sphere}"
        )));
    }
    Ok(RayPartition {
        fg: (t_near, t_sphere),
        bg: (1.0, inv_radius_floor),
    })
}

/// Sinusoidal encoding with identity passthrough first, then `(sin, cos)`
/// pairs per level and per input component.
pub fn encode_pe(x: &[f64], levels: usize) -> EncodedFeature {
    let mut values = Vec::with_capacity(encoded_len(x.len(), levels, true));
    encode_pe_into(x, levels, &mut values);
    EncodedFeature {
        values,
        config: EncodingConfig {
            levels,
            identity: true,
            integrated: false,
        },
    }
}

pub fn encode_pe_into(x: &[f64], levels: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(x);
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * PI;
        for &v in x {
            let (s, c) = (freq * v).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

/// Mean and per-axis variance of the Gaussian that approximates a conical
/// frustum between `t0` and `t1`.
pub fn frustum_gaussian(cone: &ConeRay, t0: f64, t1: f64) -> Result<(Vec3, Vec3)> {
    if !(t1 > t0) {
        return Err(Error::invalid(format!("degenerate interval [{t0}, {t1}]")));
    }
    let mu = 0.5 * (t0 + t1);
    let hw = 0.5 * (t1 - t0);
    let mu2 = mu * mu;
    let hw2 = hw * hw;
    let denom = 3.0 * mu2 + hw2;
    let t_mean = mu + 2.0 * mu * hw2 / denom;
    let t_var = hw2 / 3.0 - (4.0 / 15.0) * (hw2 * hw2 * (12.0 * mu2 - hw2)) / (denom * denom);
    let r2 = cone.radius_rate * cone.radius_rate;
    let r_var = r2 * (mu2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * hw2 * hw2 / denom);
    let d = cone.ray.direction;
    let mean = cone.ray.at(t_mean);
    let dd = Vec3::new(d.x * d.x, d.y * d.y, d.z * d.z);
    let var = Vec3::new(
        t_var * dd.x + r_var * (1.0 - dd.x),
        t_var * dd.y + r_var * (1.0 - dd.y),
        t_var * dd.z + r_var * (1.0 - dd.z),
    );
    Ok((mean, var))
}

/// Expected sinusoidal features of a frustum: frequencies are attenuated by
/// `exp(-(2^k pi)^2 var / 2)`. The identity slot holds the Gaussian mean.
pub fn encode_ipe(cone: &ConeRay, t0: f64, t1: f64, levels: usize) -> Result<EncodedFeature> {
    let (mean, var) = frustum_gaussian(cone, t0, t1)?;
    let mut values = Vec::with_capacity(encoded_len(3, levels, true));
    encode_gaussian_into(&mean.to_array(), &var.to_array(), levels, &mut values);
    Ok(EncodedFeature {
        values,
        config: EncodingConfig {
            levels,
            identity: true,
            integrated: true,
        },
    })
}

pub fn encode_gaussian_into(mean: &[f64], var: &[f64], levels: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(mean);
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * PI;
        for (&m, &v) in mean.iter().zip(var) {
            let att = (-0.5 * freq * freq * v).exp();
            let (s, c) = (freq * m).sin_cos();
            out.push(s * att);
            out.push(c * att);
        }
    }
}

/// Plain encoding of the `(x', y', z', 1/r)` quadruple followed by the
/// encoded view direction.
pub fn bg_encode(p: &BgPoint, dir: Vec3, levels: usize, dir_levels: usize) -> EncodedFeature {
    let mut values = Vec::with_capacity(encoded_len(4, levels, true) + encoded_len(3, dir_levels, true));
    encode_pe_into(&p.quad(), levels, &mut values);
    encode_pe_into(&dir.to_array(), dir_levels, &mut values);
    EncodedFeature {
        values,
        config: EncodingConfig {
            levels,
            identity: true,
            integrated: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_exit_examples() {
        let d = Vec3::new(0.3, -0.2, 0.9).normalized();
        assert!((sphere_exit_t(&Ray::new(Vec3::ZERO, d)).unwrap() - 1.0).abs() < 1e-15);
        let o = Vec3::new(0.5, 0.0, 0.0);
        assert!((sphere_exit_t(&Ray::new(o, Vec3::new(1.0, 0.0, 0.0))).unwrap() - 0.5).abs() < 1e-15);
        assert!((sphere_exit_t(&Ray::new(o, Vec3::new(-1.0, 0.0, 0.0))).unwrap() - 1.5).abs() < 1e-15);
        assert!(sphere_exit_t(&Ray::new(Vec3::new(1.5, 0.0, 0.0), d)).is_err());
    }

    #[test]
    fn bg_param_examples() {
        let b = bg_param(Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((b.dir, b.inv_radius), (Vec3::new(0.0, 0.0, 1.0), 0.5));
        let b = bg_param(Vec3::new(0.0, 3.0, 0.0)).unwrap();
        assert_eq!(b.dir, Vec3::new(0.0, 1.0, 0.0));
        assert!((b.inv_radius - 1.0 / 3.0).abs() < 1e-16);
        let p = Vec3::new(1.3, -2.2, 0.7);
        assert!((bg_param(p).unwrap().to_point() - p).norm() < 1e-12);
        assert!(bg_param(Vec3::new(0.5, 0.0, 0.0)).is_err());
    }

    #[test]
    fn partition_examples() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0));
        let part = partition_ray(&ray, 0.05, DEFAULT_INV_RADIUS_FLOOR).unwrap();
        assert_eq!(part.fg, (0.05, 1.0));
        assert_eq!(1.0 / part.bg.0, 1.0);
        assert!((1.0 / part.bg.1 - 1000.0).abs() < 1e-9);
        assert!(partition_ray(&ray, 1.5, 1e-3).is_err());

        // the two parameterizations meet at the sphere
        let ray = Ray::new(Vec3::new(0.2, -0.4, 0.1), Vec3::new(1.0, 0.5, -0.2));
        let part = partition_ray(&ray, 0.02, 1e-3).unwrap();
        let fg_end = ray.at(part.fg.1);
        let s = 1.0 - 1e-9;
        let bg_start = ray.at(sphere_hit_t(&ray, 1.0 / s));
        assert!((fg_end - bg_start).norm() < 1e-6);
    }

    #[test]
    fn pe_examples() {
        let e = encode_pe(&[0.0], 2);
        assert_eq!(e.values, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let e = encode_pe(&[1.0], 1);
        assert!(e.values[1].abs() < 1e-15 && (e.values[2] + 1.0).abs() < 1e-15);
        assert_eq!(encode_pe(&[0.1, 0.2, 0.3], 10).values.len(), 3 + 2 * 10 * 3);
    }

    #[test]
    fn ipe_limits() {
        let cone = ConeRay::new(Ray::new(Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.6, 0.8)), 1e-8);
        let (t0, t1) = (0.4, 0.4 + 1e-7);
        let ipe = encode_ipe(&cone, t0, t1, 6).unwrap();
        let pe = encode_pe(&cone.ray.at(0.5 * (t0 + t1)).to_array(), 6);
        let diff = ipe.values.iter().zip(&pe.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
        assert!(encode_ipe(&cone, 0.5, 0.5, 2).is_err());

        // high frequencies decay first
        let mut out = Vec::new();
        encode_gaussian_into(&[0.25], &[0.1], 3, &mut out);
        let amp = |k: usize| (out[1 + 2 * k].powi(2) + out[2 + 2 * k].powi(2)).sqrt();
        assert!(amp(2) < amp(1) && amp(1) < amp(0));
        assert!((amp(1) - 0.139).abs() < 1e-3, "{}", amp(1));
    }

    #[test]
    fn bg_encode_shape() {
        let a = BgPoint { dir: Vec3::new(0.0, 0.0, 1.0), inv_radius: 0.3 };
        let b = BgPoint { dir: Vec3::new(0.0, 0.0, -1.0), inv_radius: 0.3 };
        let d = Vec3::new(0.0, 1.0, 0.0);
        let ea = bg_encode(&a, d, 10, 4);
        let eb = bg_encode(&b, d, 10, 4);
        assert_eq!(ea.values.len(), 4 + 2 * 10 * 4 + 3 + 2 * 4 * 3);
        // component 4 (inverse radius) slots agree
        for k in 0..10 {
            let off = 4 + k * 8;
            assert_eq!(ea.values[off + 6], eb.values[off + 6]);
            assert_eq!(ea.values[off + 7], eb.values[off + 7]);
        }
        assert_ne!(ea.values, eb.values);
    }
}
