//! Analytic ground truth: a diffuse box room lit by emissive rectangles,
//! path-traced to HDR panoramas, plus a simulated LDR camera.
//!
//! Scene files are plain text, one record per line, `#` starts a comment:
//!
//! ```text
//! box 2.5 1.4 2.0                        # half-extents along x, y, z
//! albedo all 0.5 0.5 0.5                 # wall name or `all`, then RGB
//! albedo floor 0.45 0.4 0.35
//! emitter ceiling 0.4 0.4 0.6 0.6 1e4 1e4 1e4   # wall u0 v0 u1 v1 r g b
//! ```
//!
//! Wall names are `floor`, `ceiling`, `left`, `right`, `back` and `front`
//! (the planes `y = -hy`, `y = hy`, `x = -hx`, `x = hx`, `z = -hz`, `z = hz`).
//! Wall UV coordinates run over `[0, 1]²`: floor and ceiling map `u` to x
//! and `v` to z, left and right map `u` to z and `v` to y, back and front
//! map `u` to x and `v` to y.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{pixel_to_dir, PixelCoord, Quat, Vec3};
use crate::imgio::{write_manifest_text, write_mask, write_pfm, write_poses, Mask, Panorama, Pose};
use crate::rng::{stream, Purpose, Rng};

pub const DEFAULT_EMITTER_RADIANCE: f64 = 1e4;
pub const DEFAULT_ALBEDO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Wall {
    Floor,
    Ceiling,
    Left,
    Right,
    Back,
    Front,
}

impl Wall {
    pub const ALL: [Wall; 6] = [Wall::Floor, Wall::Ceiling, Wall::Left, Wall::Right, Wall::Back, Wall::Front];

    pub fn index(self) -> usize {
        self as usize
    }

    fn axis(self) -> usize {
        match self {
            Wall::Left | Wall::Right => 0,
            Wall::Floor | Wall::Ceiling => 1,
            Wall::Back | Wall::Front => 2,
        }
    }

    /// `-1` for the wall at the negative end of its axis.
    fn side(self) -> f64 {
        match self {
            Wall::Floor | Wall::Left | Wall::Back => -1.0,
            _ => 1.0,
        }
    }

    fn from_hit(axis: usize, positive: bool) -> Wall {
        match (axis, positive) {
            (0, false) => Wall::Left,
            (0, true) => Wall::Right,
            (1, false) => Wall::Floor,
            (1, true) => Wall::Ceiling,
            (2, false) => Wall::Back,
            _ => Wall::Front,
        }
    }

    /// Inward unit normal.
    pub fn normal(self) -> Vec3 {
        let mut n = [0.0; 3];
        n[self.axis()] = -self.side();
        Vec3::from_array(n)
    }

    /// World axes carrying `u` and `v`.
    fn uv_axes(self) -> (usize, usize) {
        match self {
            Wall::Floor | Wall::Ceiling => (0, 2),
            Wall::Left | Wall::Right => (2, 1),
            Wall::Back | Wall::Front => (0, 1),
        }
    }
}

impl fmt::Display for Wall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Wall::Floor => "floor",
            Wall::Ceiling => "ceiling",
            Wall::Left => "left",
            Wall::Right => "right",
            Wall::Back => "back",
            Wall::Front => "front",
        };
        f.write_str(s)
    }
}

impl FromStr for Wall {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Wall::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| Error::format(format!("unknown wall '{s}'")))
    }
}

/// Emissive rectangle `[u0, u1] × [v0, v1]` on a wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emitter {
    pub wall: Wall,
    pub uv_min: [f64; 2],
    pub uv_max: [f64; 2],
    pub radiance: [f64; 3],
}

/// Axis-aligned diffuse room centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScene {
    pub half_extents: Vec3,
    /// Indexed by [`Wall::index`].
    pub albedo: [[f64; 3]; 6],
    pub emitters: Vec<Emitter>,
}

impl Default for BoxScene {
    /// A 5 × 2.8 × 4 room with a bright ceiling panel and a dim window.
    fn default() -> Self {
        let mut albedo = [[DEFAULT_ALBEDO; 3]; 6];
        albedo[Wall::Floor.index()] = [0.45, 0.4, 0.35];
        albedo[Wall::Left.index()] = [0.55, 0.5, 0.45];
        albedo[Wall::Back.index()] = [0.4, 0.45, 0.55];
        let l = DEFAULT_EMITTER_RADIANCE;
        BoxScene {
            half_extents: Vec3::new(2.5, 1.4, 2.0),
            albedo,
            emitters: vec![
                Emitter {
                    wall: Wall::Ceiling,
                    uv_min: [0.4, 0.4],
                    uv_max: [0.6, 0.6],
                    radiance: [l, l, l],
                },
                Emitter {
                    wall: Wall::Right,
                    uv_min: [0.3, 0.45],
                    uv_max: [0.7, 0.8],
                    radiance: [4.0, 4.5, 5.5],
                },
            ],
        }
    }
}

impl BoxScene {
    pub fn new(half_extents: Vec3, albedo: [[f64; 3]; 6], emitters: Vec<Emitter>) -> Result<Self> {
        let s = BoxScene {
            half_extents,
            albedo,
            emitters,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.half_extents;
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0 && h.is_finite()) {
            return Err(Error::invalid("box half-extents must be positive"));
        }
        if self.albedo.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("albedo outside [0, 1]"));
        }
        for e in &self.emitters {
            let inside = (0..2).all(|k| 0.0 <= e.uv_min[k] && e.uv_min[k] < e.uv_max[k] && e.uv_max[k] <= 1.0);
            if !inside {
                return Err(Error::invalid(format!("emitter on {} leaves the wall", e.wall)));
            }
            if e.radiance.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Error::invalid("emitter radiance must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut half = None;
        let mut albedo = [[DEFAULT_ALBEDO; 3]; 6];
        let mut emitters = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::format(format!("scene line {}: {what}", lineno + 1));
            let nums = |s: &[&str]| -> Result<Vec<f64>> {
                s.iter()
                    .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad number '{v}'"))))
                    .collect()
            };
            match (f[0], f.len()) {
                ("box", 4) => {
                    let v = nums(&f[1..])?;
                    half = Some(Vec3::new(v[0], v[1], v[2]));
                }
                ("albedo", 5) => {
                    let v = nums(&f[2..])?;
                    let rgb = [v[0], v[1], v[2]];
                    if f[1] == "all" {
                        albedo = [rgb; 6];
                    } else {
                        albedo[f[1].parse::<Wall>()?.index()] = rgb;
                    }
                }
                ("emitter", 9) => {
                    let v = nums(&f[2..])?;
                    emitters.push(Emitter {
                        wall: f[1].parse()?,
                        uv_min: [v[0], v[1]],
                        uv_max: [v[2], v[3]],
                        radiance: [v[4], v[5], v[6]],
                    });
                }
                (k, n) => return Err(bad(&format!("unexpected record '{k}' with {} fields", n - 1))),
            }
        }
        let half = half.ok_or_else(|| Error::format("scene has no box record"))?;
        BoxScene::new(half, albedo, emitters)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BoxScene::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let h = self.half_extents;
        let mut s = format!("box {} {} {}\n", h.x, h.y, h.z);
        for w in Wall::ALL {
            let a = self.albedo[w.index()];
            s.push_str(&format!("albedo {w} {} {} {}\n", a[0], a[1], a[2]));
        }
        for e in &self.emitters {
            s.push_str(&format!(
                "emitter {} {} {} {} {} {} {} {}\n",
                e.wall, e.uv_min[0], e.uv_min[1], e.uv_max[0], e.uv_max[1], e.radiance[0], e.radiance[1], e.radiance[2]
            ));
        }
        s
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let h = self.half_extents;
        p.x.abs() < h.x && p.y.abs() < h.y && p.z.abs() < h.z
    }

    /// World point of wall coordinates `(u, v)`.
    pub fn wall_point(&self, wall: Wall, u: f64, v: f64) -> Vec3 {
        let h = self.half_extents.to_array();
        let (a, b) = wall.uv_axes();
        let mut p = [0.0; 3];
        p[wall.axis()] = wall.side() * h[wall.axis()];
        p[a] = (2.0 * u - 1.0) * h[a];
        p[b] = (2.0 * v - 1.0) * h[b];
        Vec3::from_array(p)
    }

    fn wall_uv(&self, wall: Wall, p: Vec3) -> (f64, f64) {
        let h = self.half_extents.to_array();
        let p = p.to_array();
        let (a, b) = wall.uv_axes();
        (0.5 * (p[a] / h[a] + 1.0), 0.5 * (p[b] / h[b] + 1.0))
    }

    pub fn emitter_area(&self, e: &Emitter) -> f64 {
        let h = self.half_extents.to_array();
        let (a, b) = e.wall.uv_axes();
        (e.uv_max[0] - e.uv_min[0]) * 2.0 * h[a] * (e.uv_max[1] - e.uv_min[1]) * 2.0 * h[b]
    }

    /// Emitted radiance at a wall point.
    pub fn emission(&self, wall: Wall, p: Vec3) -> [f64; 3] {
        let (u, v) = self.wall_uv(wall, p);
        let mut l = [0.0; 3];
        for e in self.emitters.iter().filter(|e| e.wall == wall) {
            if e.uv_min[0] <= u && u <= e.uv_max[0] && e.uv_min[1] <= v && v <= e.uv_max[1] {
                for c in 0..3 {
                    l[c] += e.radiance[c];
                }
            }
        }
        l
    }

    /// First wall hit from an interior point.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> (Wall, Vec3) {
        let o = origin.to_array();
        let d = dir.to_array();
        let h = self.half_extents.to_array();
        let mut best = (f64::INFINITY, Wall::Floor);
        for k in 0..3 {
            if d[k] != 0.0 {
                let positive = d[k] > 0.0;
                let plane = if positive { h[k] } else { -h[k] };
                let t = (plane - o[k]) / d[k];
                if t < best.0 {
                    best = (t, Wall::from_hit(k, positive));
                }
            }
        }
        let (t, wall) = best;
        let mut p = (origin + dir * t).to_array();
        p[wall.axis()] = wall.side() * h[wall.axis()];
        (wall, Vec3::from_array(p))
    }

    /// One-sample estimate of the irradiance-weighted reflected radiance
    /// `(1/π) ∫ L_e cos dω` at a wall point, summed over emitters.
    fn direct(&self, wall: Wall, p: Vec3, rng: &mut Rng) -> [f64; 3] {
        let n = wall.normal();
        let mut out = [0.0; 3];
        for e in &self.emitters {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            if e.wall == wall {
                continue;
            }
            let q = self.wall_point(
                e.wall,
                e.uv_min[0] + u * (e.uv_max[0] - e.uv_min[0]),
                e.uv_min[1] + v * (e.uv_max[1] - e.uv_min[1]),
            );
            let to = q - p;
            let d2 = to.dot(to);
            let w = to / d2.sqrt();
            let (cx, cy) = (n.dot(w), -e.wall.normal().dot(w));
            if cx > 0.0 && cy > 0.0 {
                let g = cx * cy / d2 * self.emitter_area(e) / PI;
                for c in 0..3 {
                    out[c] += e.radiance[c] * g;
                }
            }
        }
        out
    }
}

/// Cosine-weighted direction about `n`.
fn cosine_sample(n: Vec3, rng: &mut Rng) -> Vec3 {
    let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let t = if n.x.abs() > 0.5 { Vec3::new(0.0, 1.0, 0.0) } else { Vec3::new(1.0, 0.0, 0.0) };
    let a = n.cross(t).normalized();
    let b = n.cross(a);
    (a * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u1).max(0.0).sqrt()).normalized()
}

/// Monte-Carlo HDR panorama seen from `pose`.
///
/// Each pixel averages `spp` jittered paths. `bounces = 1` gathers direct
/// light only; `bounces = 2` adds one diffuse interreflection. Every pixel
/// draws from its own random stream, so the result does not depend on the
/// number of worker threads, and the direct term is identical for both
/// bounce settings.
pub fn trace_panorama(scene: &BoxScene, pose: &Pose, width: usize, spp: usize, bounces: u32, seed: u64) -> Result<Panorama> {
    scene.validate()?;
    if !scene.contains(pose.position) {
        return Err(Error::invalid("pose lies outside the box"));
    }
    if spp == 0 {
        return Err(Error::invalid("spp must be at least 1"));
    }
    if !(1..=2).contains(&bounces) {
        return Err(Error::invalid("bounces must be 1 or 2"));
    }
    if width < 2 || width % 2 != 0 {
        return Err(Error::dim("panorama width must be even"));
    }
    let height = width / 2;
    let rows: Vec<Vec<f32>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(3 * width);
            for x in 0..width {
                let k = (y * width + x) as u64;
                let rgb = trace_pixel(scene, pose, x, y, width, spp, bounces, seed, k);
                row.extend(rgb.iter().map(|&v| v as f32));
            }
            row
        })
        .collect();
    Panorama::new(width, height, rows.concat())
}

#[allow(clippy::too_many_arguments)]
fn trace_pixel(
    scene: &BoxScene,
    pose: &Pose,
    x: usize,
    y: usize,
    width: usize,
    spp: usize,
    bounces: u32,
    seed: u64,
    k: u64,
) -> [f64; 3] {
    let height = width / 2;
    let mut rng = stream(seed, Purpose::Trace, 2 * k);
    let mut bounce_rng = stream(seed, Purpose::Trace, 2 * k + 1);
    let mut direct = [0.0; 3];
    let mut indirect = [0.0; 3];
    for _ in 0..spp {
        let (jx, jy): (f64, f64) = (rng.gen(), rng.gen());
        let p = PixelCoord {
            i: (x as f64 + jx) / width as f64,
            j: (y as f64 + jy) / height as f64,
        };
        let dir = pose.orientation.rotate(pixel_to_dir(p)).normalized();
        let (wall, hit) = scene.intersect(pose.position, dir);
        let rho = scene.albedo[wall.index()];
        let le = scene.emission(wall, hit);
        let e = scene.direct(wall, hit, &mut rng);
        for c in 0..3 {
            direct[c] += le[c] + rho[c] * e[c];
        }
        if bounces == 2 {
            let wi = cosine_sample(wall.normal(), &mut bounce_rng);
            let (w2, h2) = scene.intersect(hit, wi);
            let rho2 = scene.albedo[w2.index()];
            let e2 = scene.direct(w2, h2, &mut bounce_rng);
            for c in 0..3 {
                indirect[c] += rho[c] * rho2[c] * e2[c];
            }
        }
    }
    let n = spp as f64;
    [0, 1, 2].map(|c| direct[c] / n + indirect[c] / n)
}

/// Clipped LDR frames of one scene, ordered by shutter multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack {
    /// `(multiplier, frame)` with multipliers strictly increasing.
    pub frames: Vec<(f64, Panorama)>,
}

/// Simulated camera: scale by the exposure multiplier, clip to `[0, 1]`,
/// then encode with `v^(1/gamma)`.
pub fn simulate_capture(hdr: &Panorama, multiplier: f64, gamma: f64) -> Result<Panorama> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma must be positive"));
    }
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::invalid("exposure multiplier must be positive"));
    }
    Ok(hdr.map(|v| ((v as f64 * multiplier).clamp(0.0, 1.0)).powf(1.0 / gamma) as f32))
}

/// Shutter exponents `k` of an `n`-frame bracket spanning `stops` f-stops,
/// centered on zero.
pub fn bracket_stops(n: usize, stops: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("a bracket needs at least two exposures"));
    }
    if !(stops > 0.0) {
        return Err(Error::invalid("bracket must span a positive number of stops"));
    }
    Ok((0..n).map(|i| -stops / 2.0 + stops * i as f64 / (n - 1) as f64).collect())
}

/// Captures `hdr` at multipliers `center * 2^k` for the bracket exponents `k`.
pub fn make_bracket(hdr: &Panorama, n: usize, stops: f64, gamma: f64, center: f64) -> Result<ExposureStack> {
    let frames = bracket_stops(n, stops)?
        .into_iter()
        .map(|k| {
            let m = center * k.exp2();
            Ok((m, simulate_capture(hdr, m, gamma)?))
        })
        .collect::<Result<_>>()?;
    Ok(ExposureStack { frames })
}

/// Center and scale that put every position inside the unit sphere with a
/// relative margin: `|(p - center) * scale| <= 1 / (1 + margin)`.
pub fn scene_normalization(positions: &[Vec3], margin: f64) -> (Vec3, f64) {
    if positions.is_empty() {
        return (Vec3::ZERO, 1.0);
    }
    let mut lo = positions[0].to_array();
    let mut hi = lo;
    for p in positions {
        let p = p.to_array();
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = Vec3::from_array([0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k])));
    let radius = positions.iter().map(|p| (*p - center).norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / (radius * (1.0 + margin)) } else { 1.0 };
    (center, scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub width: usize,
    pub seed: u64,
    pub spp: usize,
    pub bounces: u32,
    /// Response exponent of the simulated camera.
    pub gamma: f64,
    /// Shutter exponent `k` of the training captures; chosen from the
    /// median training radiance when absent.
    pub exposure_stops: Option<f64>,
    /// Angular radius of the photographer mask around the downward pole.
    pub mask_radius: Option<f64>,
    /// Poses are drawn in the box shrunk by this factor.
    pub pose_extent: f64,
    pub margin: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 200,
            n_test: 10,
            width: 128,
            seed: 0,
            spp: 16,
            bounces: 2,
            gamma: crate::hdr::DEFAULT_GAMMA,
            exposure_stops: None,
            mask_radius: Some(0.35),
            pose_extent: 0.5,
            margin: 0.1,
        }
    }
}

/// Paths and in-memory ground truth of a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    /// Training manifest (gamma-encoded LDR views).
    pub manifest: PathBuf,
    /// Held-out manifest (linear HDR views).
    pub test: PathBuf,
    pub center: Vec3,
    pub scale: f64,
    /// Multiplier applied before clipping the training captures.
    pub exposure: f64,
    /// World-space poses with their ground-truth HDR panoramas.
    pub train: Vec<(Pose, Panorama)>,
    pub test_views: Vec<(Pose, Panorama)>,
    pub mask: Option<Mask>,
}

fn random_pose(scene: &BoxScene, id: String, extent: f64, rng: &mut Rng) -> Pose {
    let h = scene.half_extents;
    let p = Vec3::new(
        extent * h.x * (2.0 * rng.gen::<f64>() - 1.0),
        0.6 * extent * h.y * (2.0 * rng.gen::<f64>() - 1.0),
        extent * h.z * (2.0 * rng.gen::<f64>() - 1.0),
    );
    let yaw = PI * (2.0 * rng.gen::<f64>() - 1.0);
    Pose::new(id, p, Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), yaw))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Luminance weights for linear RGB.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Shutter exponent that maps the median luminance to 0.18 (rounded to a
/// whole stop).
pub fn auto_exposure_stops(panos: &[&Panorama]) -> f64 {
    let lum: Vec<f64> = panos
        .iter()
        .flat_map(|p| {
            p.data()
                .chunks_exact(3)
                .map(|c| (0..3).map(|k| LUMA[k] * c[k] as f64).sum::<f64>())
        })
        .collect();
    let m = median(lum);
    if m > 0.0 {
        (0.18 / m).log2().round()
    } else {
        0.0
    }
}

/// Writes panoramas, masks and a manifest referencing an existing pose file.
///
/// Files land in `dir/views/{prefix}_NNN.pfm` and `dir/masks/{prefix}_NNN.pgm`;
/// the manifest is `dir/{name}`.
#[allow(clippy::too_many_arguments)]
pub fn write_view_set(
    dir: &Path,
    name: &str,
    prefix: &str,
    pose_file: &str,
    views: &[(Pose, Panorama)],
    mask: Option<&Mask>,
    center: Vec3,
    scale: f64,
    gamma: Option<f64>,
    exposure: f64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("views")).map_err(|e| Error::io(dir, e))?;
    if mask.is_some() {
        std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(views.len());
    for (k, (pose, pano)) in views.iter().enumerate() {
        let view = format!("views/{prefix}_{k:03}.pfm");
        write_pfm(pano, dir.join(&view))?;
        let mask_path = match mask {
            Some(m) => {
                let mp = format!("masks/{prefix}_{k:03}.pgm");
                write_mask(m, dir.join(&mp))?;
                Some(mp)
            }
            None => None,
        };
        entries.push((view, pose.frame_id.clone(), mask_path));
    }
    let path = dir.join(name);
    write_manifest_text(&path, pose_file, center, scale, gamma, exposure, &entries)?;
    Ok(path)
}

/// Renders and writes a training/test dataset under `dir`.
///
/// Layout: `poses.txt` (world poses), `scene.txt`, `manifest` (LDR training
/// views with optional photographer masks) and `test` (HDR held-out views).
/// Inside the mask the training captures show a dark photographer instead
/// of the room.
pub fn make_dataset(scene: &BoxScene, cfg: &DatasetConfig, dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if cfg.width < 4 || cfg.width % 2 != 0 {
        return Err(Error::dim("dataset width must be even and at least 4"));
    }
    if !(cfg.pose_extent > 0.0 && cfg.pose_extent < 1.0) {
        return Err(Error::invalid("pose extent must lie in (0, 1)"));
    }
    scene.validate()?;
    let mut rng = stream(cfg.seed, Purpose::Dataset, 0);
    let train_poses: Vec<Pose> = (0..cfg.n_train)
        .map(|k| random_pose(scene, format!("t{k:03}"), cfg.pose_extent, &mut rng))
        .collect();
    let test_poses: Vec<Pose> = (0..cfg.n_test)
        .map(|k| random_pose(scene, format!("h{k:03}"), cfg.pose_extent, &mut rng))
        .collect();
    let trace = |poses: &[Pose], offset: u64| -> Result<Vec<(Pose, Panorama)>> {
        poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(offset + k as u64);
                Ok((p.clone(), trace_panorama(scene, p, cfg.width, cfg.spp, cfg.bounces, seed)?))
            })
            .collect()
    };
    let train = trace(&train_poses, 0)?;
    let test_views = trace(&test_poses, 1 << 32)?;

    let all: Vec<Pose> = train_poses.iter().chain(&test_poses).cloned().collect();
    let (center, scale) = scene_normalization(&all.iter().map(|p| p.position).collect::<Vec<_>>(), cfg.margin);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_poses(&all, dir.join("poses.txt"))?;
    let scene_path = dir.join("scene.txt");
    crate::imgio::write_atomic(&scene_path, scene.to_text().as_bytes())?;

    let k = match cfg.exposure_stops {
        Some(k) => k,
        None => auto_exposure_stops(&train.iter().map(|v| &v.1).collect::<Vec<_>>()),
    };
    let exposure = k.exp2();
    let (w, h) = (cfg.width, cfg.width / 2);
    let mask = cfg.mask_radius.map(|r| Mask::nadir_cap(w, h, r));
    let captures = train
        .iter()
        .map(|(pose, hdr)| {
            let mut ldr = simulate_capture(hdr, exposure, cfg.gamma)?;
            if let Some(m) = &mask {
                for y in 0..h {
                    for x in 0..w {
                        if m.get(x, y) {
                            ldr.set(x, y, [0.08, 0.07, 0.06]);
                        }
                    }
                }
            }
            Ok((pose.clone(), ldr))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = write_view_set(
        dir,
        "manifest",
        "train",
        "poses.txt",
        &captures,
        mask.as_ref(),
        center,
        scale,
        Some(cfg.gamma),
        exposure,
    )?;
    let test = write_view_set(dir, "test", "test", "poses.txt", &test_views, None, center, scale, None, 1.0)?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        test,
        center,
        scale,
        exposure,
        train,
        test_views,
        mask,
    })
}

/// Writes a fused-HDR training manifest `dir/fused` for a generated dataset.
///
/// Every training view is captured as an `n`-frame bracket spanning `stops`
/// f-stops around the dataset exposure, then merged with the gamma response
/// back to absolute radiance.
pub fn write_fused_training(ds: &Dataset, n: usize, stops: f64, gamma: f64) -> Result<PathBuf> {
    let curve = crate::hdr::ResponseCurve::gamma(gamma);
    let views = ds
        .train
        .iter()
        .map(|(pose, hdr)| {
            let stack = make_bracket(hdr, n, stops, gamma, ds.exposure)?;
            let mut fused = crate::hdr::fuse_exposures(&stack, &curve)?;
            if let Some(m) = &ds.mask {
                for y in 0..fused.height() {
                    for x in 0..fused.width() {
                        if m.get(x, y) {
                            fused.set(x, y, [0.0; 3]);
                        }
                    }
                }
            }
            Ok((pose.clone(), fused))
        })
        .collect::<Result<Vec<_>>>()?;
    write_view_set(
        &ds.dir,
        "fused",
        "fused",
        "poses.txt",
        &views,
        ds.mask.as_ref(),
        ds.center,
        ds.scale,
        None,
        1.0,
    )
}
