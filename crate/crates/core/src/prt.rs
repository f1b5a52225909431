//! Precomputed radiance transfer for a diffuse "spiky sphere" on a plane,
//! seen from above by an orthographic camera.
//!
//! The transport matrix maps an environment panorama (directional radiance
//! at infinity, world y up) to the single-bounce image of the probe scene.
//! It stores the geometric factor `V · max(0, n·ω) · Δω / π` per render pixel
//! and environment texel; the per-channel albedo is applied on relighting.
//! The discrete cosine kernel of each row is rescaled so that an unoccluded
//! row sums to exactly one.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{dir_to_sph, pixel_cell_solid_angle, pixel_center, pixel_to_dir, Vec3};
use crate::imgio::{write_atomic, Image, Panorama};

pub const DEFAULT_RENDER_SIZE: usize = 64;
pub const DEFAULT_ENV_WIDTH: usize = 32;

/// Spiky sphere `r(θ, φ) = r0 (1 + a cos(kθ) cos(kφ))` above the plane `y = h`.
///
/// `θ` is the elevation and `φ` the azimuth of the direction from the
/// sphere center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeScene {
    pub center: Vec3,
    pub radius: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub plane_height: f64,
    /// The ground is the square `|x|, |z| <= plane_half_size`.
    pub plane_half_size: f64,
    /// Orthographic camera footprint `|x|, |z| <= view_half_size`.
    pub view_half_size: f64,
    pub albedo: [f64; 3],
}

impl Default for ProbeScene {
    fn default() -> Self {
        ProbeScene {
            center: Vec3::new(0.0, 1.25, 0.0),
            radius: 1.0,
            amplitude: 0.15,
            frequency: 8.0,
            plane_height: 0.0,
            plane_half_size: 4.0,
            view_half_size: 4.5,
            albedo: [0.8; 3],
        }
    }
}

/// Surface seen by a render pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Background,
    Plane,
    Sphere,
}

const LIPSCHITZ: f64 = 2.5;
const BISECTIONS: usize = 48;

impl ProbeScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && (0.0..1.0).contains(&self.amplitude)) {
            return Err(Error::invalid("probe sphere needs a positive radius and amplitude in [0, 1)"));
        }
        if self.center.y - self.bound() <= self.plane_height {
            return Err(Error::invalid("probe sphere must float above the plane"));
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("albedo outside [0, 1]"));
        }
        if !(self.plane_half_size > 0.0 && self.view_half_size > 0.0) {
            return Err(Error::invalid("plane and view sizes must be positive"));
        }
        Ok(())
    }

    fn bound(&self) -> f64 {
        self.radius * (1.0 + self.amplitude)
    }

    /// Signed distance-like implicit function; negative inside the sphere.
    pub fn implicit(&self, p: Vec3) -> f64 {
        let q = p - self.center;
        let s = dir_to_sph(q);
        let k = self.frequency;
        q.norm() - self.radius * (1.0 + self.amplitude * (k * s.elevation).cos() * (k * s.azimuth).cos())
    }

    fn sphere_normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6 * self.radius;
        let g = |e: Vec3| self.implicit(p + e * h) - self.implicit(p - e * h);
        Vec3::new(
            g(Vec3::new(1.0, 0.0, 0.0)),
            g(Vec3::new(0.0, 1.0, 0.0)),
            g(Vec3::new(0.0, 0.0, 1.0)),
        )
        .normalized()
    }

    /// First crossing of the sphere surface along `o + t d`, `t > 0`.
    pub fn hit_sphere(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let oc = o - self.center;
        let b = oc.dot(d);
        let c = oc.dot(oc) - self.bound().powi(2);
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let (t0, t1) = ((-b - root).max(0.0), -b + root);
        if t1 <= 0.0 {
            return None;
        }
        let h_min = 1e-3 * self.radius;
        let mut t = t0;
        let mut f = self.implicit(o + d * t);
        if f <= 0.0 {
            return Some(t);
        }
        while t < t1 {
            let tn = (t + (f / LIPSCHITZ).max(h_min)).min(t1);
            let fnew = self.implicit(o + d * tn);
            if fnew <= 0.0 {
                let (mut lo, mut hi) = (t, tn);
                for _ in 0..BISECTIONS {
                    let mid = 0.5 * (lo + hi);
                    if self.implicit(o + d * mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            if tn >= t1 {
                break;
            }
            t = tn;
            f = fnew;
        }
        None
    }

    fn hit_plane(&self, o: Vec3, d: Vec3) -> Option<f64> {
        if d.y >= 0.0 {
            return None;
        }
        let t = (self.plane_height - o.y) / d.y;
        let p = o + d * t;
        (t > 0.0 && p.x.abs() <= self.plane_half_size && p.z.abs() <= self.plane_half_size).then_some(t)
    }

    /// Surface point and normal seen through render pixel `(x, y)`.
    pub fn primary(&self, x: usize, y: usize, width: usize, height: usize) -> (Surface, Vec3, Vec3) {
        let v = self.view_half_size;
        let px = -v + 2.0 * v * (x as f64 + 0.5) / width as f64;
        let pz = -v + 2.0 * v * (y as f64 + 0.5) / height as f64;
        let o = Vec3::new(px, self.center.y + 2.0 * self.bound() + 1.0, pz);
        let d = Vec3::new(0.0, -1.0, 0.0);
        if let Some(t) = self.hit_sphere(o, d) {
            let p = o + d * t;
            return (Surface::Sphere, p, self.sphere_normal(p));
        }
        match self.hit_plane(o, d) {
            Some(t) => (Surface::Plane, o + d * t, Vec3::new(0.0, 1.0, 0.0)),
            None => (Surface::Background, Vec3::ZERO, Vec3::ZERO),
        }
    }

    /// True when a ray from `p` toward `d` escapes to the environment.
    pub fn visible(&self, p: Vec3, d: Vec3) -> bool {
        self.hit_sphere(p, d).is_none() && self.hit_plane(p, d).is_none()
    }

    /// FNV-1a digest of the scene parameters.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let c = self.center;
        let values = [
            c.x,
            c.y,
            c.z,
            self.radius,
            self.amplitude,
            self.frequency,
            self.plane_height,
            self.plane_half_size,
            self.view_half_size,
            self.albedo[0],
            self.albedo[1],
            self.albedo[2],
        ];
        for v in values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Dense single-bounce transport, render pixels by environment texels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMatrix {
    pub render_width: usize,
    pub render_height: usize,
    pub env_width: usize,
    pub env_height: usize,
    pub albedo: [f64; 3],
    /// Hash of the scene this matrix was built for.
    pub scene_hash: u64,
    /// Row-major geometric factors (without albedo).
    pub data: Vec<f32>,
    pub surfaces: Vec<Surface>,
}

impl TransportMatrix {
    pub fn rows(&self) -> usize {
        self.render_width * self.render_height
    }

    pub fn cols(&self) -> usize {
        self.env_width * self.env_height
    }

    pub fn env_width(&self) -> usize {
        self.env_width
    }

    pub fn row(&self, p: usize) -> &[f32] {
        let n = self.cols();
        &self.data[p * n..(p + 1) * n]
    }

    /// Entry including the albedo of channel `c`.
    pub fn entry(&self, p: usize, j: usize, c: usize) -> f64 {
        self.albedo[c] * self.row(p)[j] as f64
    }

    pub fn row_sum(&self, p: usize) -> f64 {
        self.row(p).iter().map(|&v| v as f64).sum()
    }

    fn check_env(&self, width: usize, height: usize) -> Result<()> {
        if width != self.env_width || height != self.env_height {
            return Err(Error::dim(format!(
                "environment is {width}x{height}, transport expects {}x{}",
                self.env_width, self.env_height
            )));
        }
        Ok(())
    }

    /// `T · env` per channel for row-major RGB values.
    fn apply(&self, env: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut out = vec![0.0; self.rows() * 3];
        out.par_chunks_mut(3).enumerate().for_each(|(p, px)| {
            let row = &self.data[p * n..(p + 1) * n];
            let mut acc = [0.0f64; 3];
            for (j, &g) in row.iter().enumerate() {
                if g != 0.0 {
                    let g = g as f64;
                    for c in 0..3 {
                        acc[c] += g * env[3 * j + c];
                    }
                }
            }
            for c in 0..3 {
                px[c] = self.albedo[c] * acc[c];
            }
        });
        out
    }

    /// `Tᵀ · img` per channel.
    fn apply_transpose(&self, img: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut out = vec![0.0; n * 3];
        out.par_chunks_mut(3).enumerate().for_each(|(j, e)| {
            let mut acc = [0.0f64; 3];
            for p in 0..self.rows() {
                let g = self.data[p * n + j];
                if g != 0.0 {
                    for c in 0..3 {
                        acc[c] += g as f64 * img[3 * p + c];
                    }
                }
            }
            for c in 0..3 {
                e[c] = self.albedo[c] * acc[c];
            }
        });
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let a = self.albedo;
        let mut out = format!(
            "PRT1\n{} {} {} {}\n{:016x}\n{} {} {}\n",
            self.render_width, self.render_height, self.env_width, self.env_height, self.scene_hash, a[0], a[1], a[2]
        )
        .into_bytes();
        out.extend(self.surfaces.iter().map(|s| match s {
            Surface::Background => b'b',
            Surface::Plane => b'p',
            Surface::Sphere => b's',
        }));
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        while lines.len() < 4 {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("truncated transport header"))?;
            lines.push(String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned());
            pos += end + 1;
        }
        if lines[0] != "PRT1" {
            return Err(Error::format("not a transport matrix file"));
        }
        let dims: Vec<usize> = lines[1]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format("bad transport dimensions")))
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(Error::format("bad transport dimensions"));
        }
        let scene_hash = u64::from_str_radix(&lines[2], 16).map_err(|_| Error::format("bad transport hash"))?;
        let a: Vec<f64> = lines[3]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format("bad transport albedo")))
            .collect::<Result<_>>()?;
        if a.len() != 3 {
            return Err(Error::format("bad transport albedo"));
        }
        let (rows, cols) = (dims[0] * dims[1], dims[2] * dims[3]);
        if bytes.len() != pos + rows + rows * cols * 4 {
            return Err(Error::format("transport payload has the wrong size"));
        }
        let surfaces = bytes[pos..pos + rows]
            .iter()
            .map(|b| match b {
                b'b' => Ok(Surface::Background),
                b'p' => Ok(Surface::Plane),
                b's' => Ok(Surface::Sphere),
                _ => Err(Error::format("bad surface tag")),
            })
            .collect::<Result<_>>()?;
        let data: Vec<f32> = bytes[pos + rows..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::format("transport entries must be finite and non-negative"));
        }
        Ok(TransportMatrix {
            render_width: dims[0],
            render_height: dims[1],
            env_width: dims[2],
            env_height: dims[3],
            albedo: [a[0], a[1], a[2]],
            scene_hash,
            data,
            surfaces,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TransportMatrix::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }
}

/// Builds the transport matrix by casting one shadow ray per render pixel
/// and environment texel center.
pub fn build_transport(
    scene: &ProbeScene,
    render_width: usize,
    render_height: usize,
    env_width: usize,
) -> Result<TransportMatrix> {
    scene.validate()?;
    if render_width < 8 || render_height < 8 {
        return Err(Error::dim("render resolution must be at least 8x8"));
    }
    if env_width < 4 || env_width % 2 != 0 {
        return Err(Error::dim("environment width must be even and at least 4"));
    }
    let env_height = env_width / 2;
    let texels: Vec<(Vec3, f64)> = (0..env_height)
        .flat_map(|j| {
            (0..env_width).map(move |i| {
                (
                    pixel_to_dir(pixel_center(i, j, env_width, env_height)),
                    pixel_cell_solid_angle(j, env_width, env_height),
                )
            })
        })
        .collect();
    let n = texels.len();
    let rows: Vec<(Surface, Vec<f32>)> = (0..render_width * render_height)
        .into_par_iter()
        .map(|p| {
            let (surface, x, normal) = scene.primary(p % render_width, p / render_width, render_width, render_height);
            let mut row = vec![0.0f32; n];
            if surface == Surface::Background {
                return (surface, row);
            }
            let origin = x + normal * (1e-4 * scene.radius);
            let mut kernel = 0.0;
            let mut weights = vec![0.0f64; n];
            for (j, &(d, sa)) in texels.iter().enumerate() {
                let c = normal.dot(d);
                if c > 0.0 {
                    kernel += c * sa;
                    if scene.visible(origin, d) {
                        weights[j] = c * sa;
                    }
                }
            }
            if kernel > 0.0 {
                for (r, w) in row.iter_mut().zip(&weights) {
                    *r = (w / kernel) as f32;
                }
            }
            (surface, row)
        })
        .collect();
    let mut data = Vec::with_capacity(rows.len() * n);
    let mut surfaces = Vec::with_capacity(rows.len());
    for (s, r) in rows {
        surfaces.push(s);
        data.extend(r);
    }
    Ok(TransportMatrix {
        render_width,
        render_height,
        env_width,
        env_height,
        albedo: scene.albedo,
        scene_hash: scene.hash(),
        data,
        surfaces,
    })
}

/// Cache file name for a scene and resolution.
pub fn cache_path(dir: &Path, scene: &ProbeScene, render_width: usize, render_height: usize, env_width: usize) -> PathBuf {
    dir.join(format!(
        "transport_{:016x}_{render_width}x{render_height}_{env_width}.prt",
        scene.hash()
    ))
}

/// Loads the matrix from `dir` when a matching file exists, otherwise
/// builds and stores it.
pub fn build_transport_cached(
    scene: &ProbeScene,
    render_width: usize,
    render_height: usize,
    env_width: usize,
    dir: impl AsRef<Path>,
) -> Result<TransportMatrix> {
    let dir = dir.as_ref();
    let path = cache_path(dir, scene, render_width, render_height, env_width);
    if let Ok(t) = TransportMatrix::read(&path) {
        let dims = (t.render_width, t.render_height, t.env_width);
        if t.scene_hash == scene.hash() && dims == (render_width, render_height, env_width) {
            return Ok(t);
        }
    }
    let t = build_transport(scene, render_width, render_height, env_width)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    t.write(&path)?;
    Ok(t)
}

fn to_f64(p: &Panorama) -> Vec<f64> {
    p.data().iter().map(|&v| v as f64).collect()
}

/// Image of the probe scene lit by `env`.
pub fn relight(t: &TransportMatrix, env: &Panorama) -> Result<Image> {
    t.check_env(env.width(), env.height())?;
    let out = t.apply(&to_f64(env));
    Ok(Image {
        width: t.render_width,
        height: t.render_height,
        data: out.into_iter().map(|v| v as f32).collect(),
    })
}

/// Root-mean-square difference of the relit images of `y` and `target`.
pub fn render_rmse(y: &Panorama, target: &Panorama, t: &TransportMatrix) -> Result<f64> {
    t.check_env(y.width(), y.height())?;
    Ok(render_rmse_grad(&to_f64(y), target, t)?.0)
}

/// [`render_rmse`] for raw row-major RGB predictions, with its gradient.
pub fn render_rmse_grad(y: &[f64], target: &Panorama, t: &TransportMatrix) -> Result<(f64, Vec<f64>)> {
    t.check_env(target.width(), target.height())?;
    if y.len() != target.data().len() {
        return Err(Error::dim("prediction and target differ in size"));
    }
    let diff: Vec<f64> = y.iter().zip(target.data()).map(|(&a, &b)| a - b as f64).collect();
    let r = t.apply(&diff);
    let m = r.len() as f64;
    let rmse = (crate::net::pairwise_sum(&r.iter().map(|v| v * v).collect::<Vec<_>>()) / m).sqrt();
    if rmse == 0.0 {
        return Ok((0.0, vec![0.0; y.len()]));
    }
    let scaled: Vec<f64> = r.iter().map(|v| v / (m * rmse)).collect();
    Ok((rmse, t.apply_transpose(&scaled)))
}
