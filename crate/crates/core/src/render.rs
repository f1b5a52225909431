//! Volumetric quadrature along partitioned rays, hierarchical resampling
//! and foreground/background compositing.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{partition_ray, sphere_hit_t, BgPoint, ConeRay, Ray, DEFAULT_INV_RADIUS_FLOOR};
use crate::geom::{pixel_center, pixel_radius_rate, pixel_to_dir, Vec3};
use crate::imgio::{Panorama, Pose};
use crate::rng::{stream, Purpose, Rng};

pub const DEFAULT_COARSE_SAMPLES: usize = 64;
pub const DEFAULT_FINE_SAMPLES: usize = 128;
pub const DEFAULT_T_NEAR: f64 = 0.02;
pub const DEFAULT_PDF_FLOOR: f64 = 1e-5;
pub const DEFAULT_RENDER_WIDTH: usize = 960;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub t_near: f64,
    pub inv_radius_floor: f64,
    /// Jitter samples inside their strata (training) or use midpoints.
    pub perturb: bool,
    pub pdf_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: DEFAULT_COARSE_SAMPLES,
            n_fine: DEFAULT_FINE_SAMPLES,
            t_near: DEFAULT_T_NEAR,
            inv_radius_floor: DEFAULT_INV_RADIUS_FLOOR,
            perturb: false,
            pdf_floor: DEFAULT_PDF_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Inside the unit sphere, parameterized by distance `t`.
    Fg,
    /// Outside the unit sphere, parameterized by inverse radius.
    Bg,
}

/// Quadrature intervals along one ray segment.
///
/// Foreground boundaries increase in `t`; background boundaries decrease in
/// inverse radius. `deltas` always hold metric lengths along the ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervals {
    pub segment: Segment,
    pub boundaries: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Intervals {
    pub fn fg(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("foreground boundaries must be strictly increasing"));
        }
        let deltas = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Intervals {
            segment: Segment::Fg,
            boundaries,
            deltas,
        })
    }

    /// Background intervals; lengths are the radial distances
    /// `r(s_{i+1}) - r(s_i)` with `r = 1/s`.
    pub fn bg(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2
            || boundaries.windows(2).any(|w| !(w[1] < w[0]))
            || boundaries[0] > 1.0
            || *boundaries.last().unwrap() <= 0.0
        {
            return Err(Error::invalid(
                "background boundaries must decrease strictly within (0, 1]",
            ));
        }
        let deltas = boundaries.windows(2).map(|w| 1.0 / w[1] - 1.0 / w[0]).collect();
        Ok(Intervals {
            segment: Segment::Bg,
            boundaries,
            deltas,
        })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Intervals with the field's density and radiance per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub intervals: Intervals,
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceEstimate {
    pub rgb: [f64; 3],
    /// Transmittance left after the last interval.
    pub t_end: f64,
    pub weights: Vec<f64>,
}

pub fn composite(samples: &RaySamples) -> Result<RadianceEstimate> {
    let n = samples.intervals.len();
    if samples.sigma.len() != n || samples.rgb.len() != n {
        return Err(Error::dim("sample values do not match the intervals"));
    }
    if samples.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid("densities must be finite and nonnegative"));
    }
    let mut weights = Vec::with_capacity(n);
    let mut rgb = [0.0; 3];
    let mut optical = 0.0f64;
    for i in 0..n {
        let tau = samples.sigma[i] * samples.intervals.deltas[i];
        let trans = (-optical).exp();
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        for c in 0..3 {
            rgb[c] += w * samples.rgb[i][c];
        }
        weights.push(w);
        optical += tau;
    }
    Ok(RadianceEstimate {
        rgb,
        t_end: (-optical).exp(),
        weights,
    })
}

/// Gradients of `dot(d_rgb, est.rgb) + d_tend * est.t_end` with respect to
/// the per-interval densities and radiances.
pub fn composite_backward(
    samples: &RaySamples,
    est: &RadianceEstimate,
    d_rgb: [f64; 3],
    d_tend: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = samples.intervals.len();
    let s: Vec<f64> = samples
        .rgb
        .iter()
        .map(|c| c[0] * d_rgb[0] + c[1] * d_rgb[1] + c[2] * d_rgb[2])
        .collect();
    let mut d_sigma = vec![0.0; n];
    let d_color = est.weights.iter().map(|&w| [w * d_rgb[0], w * d_rgb[1], w * d_rgb[2]]).collect();
    // suffix sums of w_i s_i for i > k
    let mut tail = 0.0;
    let mut optical: f64 = samples
        .sigma
        .iter()
        .zip(&samples.intervals.deltas)
        .map(|(a, b)| a * b)
        .sum();
    for k in (0..n).rev() {
        let delta = samples.intervals.deltas[k];
        let t_next = (-optical).exp();
        d_sigma[k] = delta * (t_next * s[k] - tail) - delta * est.t_end * d_tend;
        tail += est.weights[k] * s[k];
        optical -= samples.sigma[k] * delta;
    }
    (d_sigma, d_color)
}

/// `C = C_fg + T_fg * C_bg`.
pub fn compose_fg_bg(fg: &RadianceEstimate, bg: &RadianceEstimate) -> [f64; 3] {
    [
        fg.rgb[0] + fg.t_end * bg.rgb[0],
        fg.rgb[1] + fg.t_end * bg.rgb[1],
        fg.rgb[2] + fg.t_end * bg.rgb[2],
    ]
}

/// One sample per stratum of `[a, b]` (either orientation). Without an RNG
/// the stratum midpoints are used.
pub fn stratified_samples(a: f64, b: f64, n: usize, rng: Option<&mut Rng>) -> Vec<f64> {
    let step = (b - a) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|k| a + step * (k as f64 + rng.gen::<f64>())).collect(),
        None => (0..n).map(|k| a + step * (k as f64 + 0.5)).collect(),
    }
}

/// Interval boundaries around sorted sample points: the segment ends plus
/// the midpoints between neighbours.
pub fn boundaries_from_samples(a: f64, b: f64, samples: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len() + 1);
    out.push(a);
    out.extend(samples.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(b);
    out
}

/// Inverse-CDF draws from the piecewise-constant density proportional to
/// `weights + floor` over the intervals `boundaries`. Uses one jittered
/// draw per stratum of the unit interval; falls back to stratified sampling
/// when every weight is zero.
pub fn importance_resample(weights: &[f64], boundaries: &[f64], m: usize, rng: &mut Rng, floor: f64) -> Result<Vec<f64>> {
    if boundaries.len() != weights.len() + 1 || weights.is_empty() {
        return Err(Error::dim("need one weight per interval"));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let (a, b) = (boundaries[0], *boundaries.last().unwrap());
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(stratified_samples(a, b, m, Some(rng)));
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += w + floor;
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let u = (k as f64 + rng.gen::<f64>()) / m as f64 * total;
        let idx = (cdf.partition_point(|&c| c <= u).max(1) - 1).min(weights.len() - 1);
        let span = cdf[idx + 1] - cdf[idx];
        let frac = if span > 0.0 { ((u - cdf[idx]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(boundaries[idx] + frac * (boundaries[idx + 1] - boundaries[idx]));
    }
    Ok(out)
}

/// Merges two sample sets in the orientation of the segment.
pub fn merge_samples(a: &[f64], b: &[f64], descending: bool) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if descending {
        all.reverse();
    }
    all.dedup();
    all
}

/// Query point handed to a radiance field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldSample {
    /// Conical frustum between distances `t0` and `t1`.
    Fg { cone: ConeRay, t0: f64, t1: f64 },
    /// Representative background point of an inverse-radius interval.
    Bg { dir: Vec3, point: BgPoint },
}

impl FieldSample {
    pub fn position(&self) -> Vec3 {
        match self {
            FieldSample::Fg { cone, t0, t1 } => cone.ray.at(0.5 * (t0 + t1)),
            FieldSample::Bg { point, .. } => point.to_point(),
        }
    }

    pub fn direction(&self) -> Vec3 {
        match self {
            FieldSample::Fg { cone, .. } => cone.ray.direction,
            FieldSample::Bg { dir, .. } => *dir,
        }
    }
}

/// Anything that maps query points to `(density, radiance)`.
pub trait FieldQuery: Sync {
    fn query(&self, samples: &[FieldSample]) -> Result<Vec<(f64, [f64; 3])>>;
}

/// Field samples for every interval of a segment.
pub fn field_samples(cone: &ConeRay, iv: &Intervals) -> Vec<FieldSample> {
    match iv.segment {
        Segment::Fg => iv
            .boundaries
            .windows(2)
            .map(|w| FieldSample::Fg {
                cone: *cone,
                t0: w[0],
                t1: w[1],
            })
            .collect(),
        Segment::Bg => iv
            .boundaries
            .windows(2)
            .map(|w| {
                let s = 0.5 * (w[0] + w[1]);
                let t = sphere_hit_t(&cone.ray, 1.0 / s);
                let p = cone.ray.at(t);
                let r = p.norm();
                FieldSample::Bg {
                    dir: cone.ray.direction,
                    point: BgPoint {
                        dir: p / r,
                        inv_radius: 1.0 / r,
                    },
                }
            })
            .collect(),
    }
}

/// Coarse sample positions of both segments of a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePlan {
    pub fg_range: (f64, f64),
    pub bg_range: (f64, f64),
    pub fg_points: Vec<f64>,
    pub bg_points: Vec<f64>,
}

impl CoarsePlan {
    pub fn new(ray: &Ray, config: &RenderConfig, rng: &mut Rng) -> Result<Self> {
        let part = partition_ray(ray, config.t_near, config.inv_radius_floor)?;
        let jitter = |rng: &mut Rng, a, b| {
            if config.perturb {
                stratified_samples(a, b, config.n_coarse, Some(rng))
            } else {
                stratified_samples(a, b, config.n_coarse, None)
            }
        };
        let fg_points = jitter(rng, part.fg.0, part.fg.1);
        let bg_points = jitter(rng, part.bg.0, part.bg.1);
        Ok(CoarsePlan {
            fg_range: part.fg,
            bg_range: part.bg,
            fg_points,
            bg_points,
        })
    }

    pub fn fg_intervals(&self, points: &[f64]) -> Result<Intervals> {
        Intervals::fg(boundaries_from_samples(self.fg_range.0, self.fg_range.1, points))
    }

    pub fn bg_intervals(&self, points: &[f64]) -> Result<Intervals> {
        Intervals::bg(boundaries_from_samples(self.bg_range.0, self.bg_range.1, points))
    }

    /// Fine sample positions (coarse plus importance draws) for both segments.
    pub fn refine(
        &self,
        fg_weights: &[f64],
        fg: &Intervals,
        bg_weights: &[f64],
        bg: &Intervals,
        config: &RenderConfig,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = importance_resample(fg_weights, &fg.boundaries, config.n_fine, rng, config.pdf_floor)?;
        let b = importance_resample(bg_weights, &bg.boundaries, config.n_fine, rng, config.pdf_floor)?;
        Ok((merge_samples(&self.fg_points, &f, false), merge_samples(&self.bg_points, &b, true)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassResult {
    pub rgb: [f64; 3],
    pub fg: RadianceEstimate,
    pub bg: RadianceEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub coarse: PassResult,
    pub fine: PassResult,
}

fn evaluate_pass(
    field: &dyn FieldQuery,
    cones: &[ConeRay],
    segments: &[(Intervals, Intervals)],
) -> Result<Vec<PassResult>> {
    let mut queries = Vec::new();
    for (cone, (fg, bg)) in cones.iter().zip(segments) {
        queries.extend(field_samples(cone, fg));
        queries.extend(field_samples(cone, bg));
    }
    let values = field.query(&queries)?;
    if values.len() != queries.len() {
        return Err(Error::dim("field returned the wrong number of values"));
    }
    let mut out = Vec::with_capacity(cones.len());
    let mut k = 0;
    for (fg, bg) in segments {
        let mut take = |iv: &Intervals| {
            let n = iv.len();
            let vals = &values[k..k + n];
            k += n;
            RaySamples {
                intervals: iv.clone(),
                sigma: vals.iter().map(|v| v.0).collect(),
                rgb: vals.iter().map(|v| v.1).collect(),
            }
        };
        let fs = take(fg);
        let bs = take(bg);
        let fe = composite(&fs)?;
        let be = composite(&bs)?;
        out.push(PassResult {
            rgb: compose_fg_bg(&fe, &be),
            fg: fe,
            bg: be,
        });
    }
    Ok(out)
}

/// Coarse and fine renders of a batch of rays. `rngs[i]` drives ray `i`.
pub fn render_rays(
    field: &dyn FieldQuery,
    cones: &[ConeRay],
    config: &RenderConfig,
    rngs: &mut [Rng],
) -> Result<Vec<RayRender>> {
    let plans = cones
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, rng)| CoarsePlan::new(&c.ray, config, rng))
        .collect::<Result<Vec<_>>>()?;
    let coarse_iv = plans
        .iter()
        .map(|p| Ok((p.fg_intervals(&p.fg_points)?, p.bg_intervals(&p.bg_points)?)))
        .collect::<Result<Vec<_>>>()?;
    let coarse = evaluate_pass(field, cones, &coarse_iv)?;
    let mut fine_iv = Vec::with_capacity(cones.len());
    for i in 0..cones.len() {
        let (fg, bg) = &coarse_iv[i];
        let (fpts, bpts) = plans[i].refine(&coarse[i].fg.weights, fg, &coarse[i].bg.weights, bg, config, &mut rngs[i])?;
        fine_iv.push((plans[i].fg_intervals(&fpts)?, plans[i].bg_intervals(&bpts)?));
    }
    let fine = evaluate_pass(field, cones, &fine_iv)?;
    Ok(coarse
        .into_iter()
        .zip(fine)
        .map(|(coarse, fine)| RayRender { coarse, fine })
        .collect())
}

pub fn render_ray(field: &dyn FieldQuery, cone: &ConeRay, config: &RenderConfig, rng: &mut Rng) -> Result<RayRender> {
    let mut rngs = [rng.clone()];
    let out = render_rays(field, std::slice::from_ref(cone), config, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().unwrap())
}

/// Rays per work unit; fixed so results never depend on the worker count.
const RENDER_CHUNK: usize = 64;

/// Renders the fine pass at every pixel center of a `width x width/2`
/// panorama. Pixel `k` uses the random stream `(seed, k)`.
pub fn render_panorama(
    field: &dyn FieldQuery,
    pose: &Pose,
    width: usize,
    config: &RenderConfig,
    seed: u64,
) -> Result<Panorama> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::dim("panorama width must be even and positive"));
    }
    if pose.position.norm() >= 1.0 {
        return Err(Error::invalid("render pose lies outside the unit sphere"));
    }
    let height = width / 2;
    let rate = pixel_radius_rate(width);
    let n = width * height;
    let chunks: Vec<Vec<[f32; 3]>> = (0..n.div_ceil(RENDER_CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * RENDER_CHUNK..((c + 1) * RENDER_CHUNK).min(n);
            let cones: Vec<ConeRay> = range
                .clone()
                .map(|k| {
                    let d = pixel_to_dir(pixel_center(k % width, k / width, width, height));
                    ConeRay::new(Ray::new(pose.position, pose.orientation.rotate(d)), rate)
                })
                .collect();
            let mut rngs: Vec<Rng> = range.map(|k| stream(seed, Purpose::Render, k as u64)).collect();
            let out = render_rays(field, &cones, config, &mut rngs)?;
            Ok(out
                .iter()
                .map(|r| r.fine.rgb.map(|v| v as f32))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f32> = chunks.into_iter().flatten().flatten().collect();
    Panorama::new(width, height, data.into_iter().map(|v| v.max(0.0)).collect())
}
