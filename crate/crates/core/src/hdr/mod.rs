//! LDR to HDR: response-curve linearization, exposure fusion, saturation
//! masks, training augmentations and two inverse-tonemapping models.

mod learned;

pub use learned::{train_ldr2hdr, training_pair, LearnedConfig, LearnedModel, Ldr2HdrTrainConfig};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgio::Panorama;
use crate::prt::{render_rmse_grad, TransportMatrix};
use crate::rng::Rng;
use crate::synth::ExposureStack;

pub const DEFAULT_GAMMA: f64 = 2.2;
/// Readings at or above this value are treated as saturated during fusion.
pub const FUSE_HIGH: f64 = 0.995;
pub const FUSE_LOW: f64 = 0.005;

/// Camera response `v = clip(e / gain)^(1/gamma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseCurve {
    pub gamma: f64,
    pub gain: [f64; 3],
}

impl ResponseCurve {
    pub fn gamma(gamma: f64) -> Self {
        ResponseCurve { gamma, gain: [1.0; 3] }
    }

    pub fn linear() -> Self {
        Self::gamma(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || self.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::invalid("response curve needs gamma > 0 and positive gains"));
        }
        Ok(())
    }

    /// `gain * v^gamma` for one channel.
    pub fn decode(&self, v: f64, channel: usize) -> f64 {
        self.gain[channel] * v.max(0.0).powf(self.gamma)
    }
}

impl Default for ResponseCurve {
    fn default() -> Self {
        Self::gamma(DEFAULT_GAMMA)
    }
}

const LDR_SLACK: f32 = 1e-6;

fn check_ldr(pano: &Panorama) -> Result<()> {
    if pano.data().iter().any(|&v| v > 1.0 + LDR_SLACK) {
        return Err(Error::invalid("LDR values must lie in [0, 1]"));
    }
    Ok(())
}

pub fn linearize(pano: &Panorama, curve: &ResponseCurve) -> Result<Panorama> {
    curve.validate()?;
    check_ldr(pano)?;
    let data = pano
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| curve.decode(v.min(1.0) as f64, k % 3) as f32)
        .collect();
    Panorama::new(pano.width(), pano.height(), data)
}

fn hat(v: f64) -> f64 {
    if v >= FUSE_HIGH || v <= FUSE_LOW {
        0.0
    } else {
        1.0 - (2.0 * v - 1.0).abs()
    }
}

/// Weighted merge of an exposure bracket into linear radiance.
pub fn fuse_exposures(stack: &ExposureStack, curve: &ResponseCurve) -> Result<Panorama> {
    curve.validate()?;
    let frames = &stack.frames;
    if frames.is_empty() {
        return Err(Error::invalid("empty exposure stack"));
    }
    if frames.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::invalid("exposure multipliers must increase"));
    }
    let (w, h) = (frames[0].1.width(), frames[0].1.height());
    if frames.iter().any(|f| f.1.width() != w || f.1.height() != h) {
        return Err(Error::dim("bracket frames differ in size"));
    }
    for f in frames {
        check_ldr(&f.1)?;
    }
    let n = w * h * 3;
    let mut out = vec![0.0f32; n];
    for (k, o) in out.iter_mut().enumerate() {
        let c = k % 3;
        let (mut num, mut den) = (0.0, 0.0);
        for (mult, frame) in frames {
            let v = frame.data()[k] as f64;
            let wt = hat(v);
            if wt > 0.0 {
                num += wt * curve.decode(v, c) / mult;
                den += wt;
            }
        }
        *o = if den > 0.0 {
            (num / den) as f32
        } else {
            let (mult, frame) = &frames[0];
            (curve.decode(frame.data()[k] as f64, c) / mult) as f32
        };
    }
    Panorama::new(w, h, out)
}

/// Per-pixel weight in `[0, 1]`; 1 marks saturated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl SaturationMask {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smoothstep from 0 at `tau` to 1 at 1.0 on the max channel.
pub fn saturation_mask(pano: &Panorama, tau: f64) -> Result<SaturationMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("saturation threshold must lie in (0, 1)"));
    }
    let data = pano
        .data()
        .chunks_exact(3)
        .map(|p| smoothstep(tau, 1.0, p[0].max(p[1]).max(p[2]) as f64) as f32)
        .collect();
    Ok(SaturationMask {
        width: pano.width(),
        height: pano.height(),
        data,
    })
}

/// Expansion of saturated pixels: `lin * (1 + (B - 1) * mask^p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParametricModel {
    pub tau: f64,
    pub exponent: f64,
    pub max_boost: f64,
}

impl Default for ParametricModel {
    fn default() -> Self {
        ParametricModel {
            tau: 0.9,
            exponent: 2.0,
            max_boost: 64.0,
        }
    }
}

impl ParametricModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) || !(self.exponent > 0.0) || !(self.max_boost >= 1.0) {
            return Err(Error::invalid("parametric model needs tau in (0,1), exponent > 0, boost >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ldr2HdrModel {
    Parametric(ParametricModel),
    Learned(LearnedModel<f32>),
}

/// HDR estimate from one gamma-encoded LDR panorama. Unsaturated pixels are
/// returned exactly as [`linearize`] gives them.
pub fn uplift(model: &Ldr2HdrModel, ldr: &Panorama, curve: &ResponseCurve) -> Result<Panorama> {
    let lin = linearize(ldr, curve)?;
    match model {
        Ldr2HdrModel::Parametric(p) => {
            p.validate()?;
            let mask = saturation_mask(ldr, p.tau)?;
            let data = lin
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let m = mask.data[k / 3] as f64;
                    (v as f64 * (1.0 + (p.max_boost - 1.0) * m.powf(p.exponent))) as f32
                })
                .collect();
            Panorama::new(lin.width(), lin.height(), data)
        }
        Ldr2HdrModel::Learned(m) => m.apply(&lin),
    }
}

/// Augmentation draws; [`AugmentParams::identity`] leaves the image alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub roll: isize,
    /// Intensity scale `2^gamma1`.
    pub gamma1: f64,
    /// Exposure shift that moves the median luminance to `0.5 + gamma2`.
    pub gamma2: Option<f64>,
    /// Hue rotation about the gray axis, degrees.
    pub hue_deg: f64,
    /// Unsharp-mask blur radius (amount 1); 0 disables.
    pub sharpen_sigma: f64,
    pub noise_sigma: f64,
    /// Tonemap exponent offset: `x^(1 + gamma3)`.
    pub gamma3: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            roll: 0,
            gamma1: 0.0,
            gamma2: None,
            hue_deg: 0.0,
            sharpen_sigma: 0.0,
            noise_sigma: 0.0,
            gamma3: 0.0,
        }
    }

    pub fn sample(rng: &mut Rng, width: usize) -> Self {
        AugmentParams {
            roll: rng.gen_range(0..width.max(1)) as isize,
            gamma1: rng.gen_range(-0.1..0.1),
            gamma2: Some(rng.gen_range(-0.1..0.1)),
            hue_deg: rng.gen_range(-5.0..5.0),
            sharpen_sigma: rng.gen_range(0.0..3.0),
            noise_sigma: 0.01,
            gamma3: rng.gen_range(-0.1..0.1),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rotation about the `(1,1,1)` axis.
fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = 1.0 - c;
    let d = c + t / 3.0;
    let a = t / 3.0 - s * k;
    let b = t / 3.0 + s * k;
    [[d, a, b], [b, d, a], [a, b, d]]
}

/// Separable Gaussian blur, wrapping in azimuth and clamping at the poles.
fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let xx = (x as i64 + i as i64 - r).rem_euclid(w as i64) as usize;
                    acc += kv * data[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc / norm;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc / norm;
            }
        }
    }
    out
}

/// Applies `params` to an HDR panorama, producing `(input_ldr, target_hdr)`.
/// The input is linear, clipped to `[0, 1]`.
pub fn augment_with(pano: &Panorama, params: &AugmentParams, rng: &mut Rng) -> Result<(Panorama, Panorama)> {
    let (w, h) = (pano.width(), pano.height());
    let rolled = pano.roll(params.roll);
    let mut t: Vec<f64> = rolled.data().iter().map(|&v| v as f64 * 2f64.powf(params.gamma1)).collect();
    if let Some(g2) = params.gamma2 {
        let lum: Vec<f64> = t
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect();
        let med = median(lum);
        if med > 0.0 {
            let s = (0.5 + g2) / med;
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    let target = Panorama::new(w, h, t.iter().map(|&v| v as f32).collect())?;

    let mut x: Vec<f64> = t.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    if params.hue_deg != 0.0 {
        let m = hue_matrix(params.hue_deg);
        for p in x.chunks_exact_mut(3) {
            let q = [p[0], p[1], p[2]];
            for r in 0..3 {
                p[r] = m[r][0] * q[0] + m[r][1] * q[1] + m[r][2] * q[2];
            }
        }
    }
    if params.sharpen_sigma > 0.0 {
        let blur = gaussian_blur(&x, w, h, params.sharpen_sigma);
        x.iter_mut().zip(&blur).for_each(|(v, b)| *v += *v - b);
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        x.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    let e = 1.0 + params.gamma3;
    let input = x.iter().map(|v| v.clamp(0.0, 1.0).powf(e) as f32).collect();
    Ok((Panorama::new(w, h, input)?, target))
}

pub fn augment(pano: &Panorama, rng: &mut Rng) -> Result<(Panorama, Panorama)> {
    let params = AugmentParams::sample(rng, pano.width());
    augment_with(pano, &params, rng)
}

/// Weights and settings of the HDR training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HdrLossConfig {
    /// Weight of the squared-mean term of the scale-invariant log loss.
    pub lambda: f64,
    pub log_eps: f64,
    /// Threshold for the true saturation mask used by the cross-entropy.
    pub tau: f64,
    pub render_weight: f64,
}

impl Default for HdrLossConfig {
    fn default() -> Self {
        HdrLossConfig {
            lambda: 1.0,
            log_eps: 1e-6,
            tau: 0.9,
            render_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdrLoss {
    pub log_term: f64,
    pub bce_term: f64,
    pub render_term: f64,
    pub total: f64,
    /// Gradient of `total` with respect to every predicted value.
    pub d_pred: Vec<f64>,
    /// Gradient with respect to the predicted attention (one per pixel).
    pub d_attention: Vec<f64>,
}

/// `l_si + BCE(attention, mask(clip(target))) + w * render_rmse(pred, target)`.
///
/// `pred` is row-major RGB like a [`Panorama`]. Without an attention map the
/// cross-entropy term is zero; without a transport matrix so is the
/// rendering term.
pub fn loss_hdr(
    pred: &[f64],
    target: &Panorama,
    attention: Option<&[f64]>,
    transport: Option<&TransportMatrix>,
    cfg: &HdrLossConfig,
) -> Result<HdrLoss> {
    let n = target.data().len();
    if pred.len() != n {
        return Err(Error::dim(format!("{} predicted values for {} target values", pred.len(), n)));
    }
    let eps = cfg.log_eps;
    let d: Vec<f64> = pred
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.max(0.0) + eps).ln() - (t as f64 + eps).ln())
        .collect();
    let nf = n as f64;
    let sum_d = crate::net::pairwise_sum(&d);
    let sum_d2 = crate::net::pairwise_sum(&d.iter().map(|v| v * v).collect::<Vec<_>>());
    let log_term = sum_d2 / nf - cfg.lambda * (sum_d / nf).powi(2);
    let mut d_pred: Vec<f64> = d
        .iter()
        .zip(pred)
        .map(|(&di, &p)| (2.0 * di / nf - 2.0 * cfg.lambda * sum_d / (nf * nf)) / (p.max(0.0) + eps))
        .collect();

    let mut bce_term = 0.0;
    let mut d_attention = Vec::new();
    if let Some(a) = attention {
        if a.len() != target.pixels() {
            return Err(Error::dim("attention map does not match the target"));
        }
        let clipped = target.map(|v| v.min(1.0));
        let m = saturation_mask(&clipped, cfg.tau)?;
        let np = a.len() as f64;
        let mut terms = Vec::with_capacity(a.len());
        for (&ai, &mi) in a.iter().zip(&m.data) {
            let ai = ai.clamp(1e-7, 1.0 - 1e-7);
            let mi = mi as f64;
            terms.push(-(mi * ai.ln() + (1.0 - mi) * (1.0 - ai).ln()));
            d_attention.push((ai - mi) / (ai * (1.0 - ai)) / np);
        }
        bce_term = crate::net::pairwise_sum(&terms) / np;
    }

    let mut render_term = 0.0;
    if let (Some(t), true) = (transport, cfg.render_weight != 0.0) {
        let (r, g) = render_rmse_grad(pred, target, t)?;
        render_term = r;
        for (dp, gi) in d_pred.iter_mut().zip(g) {
            *dp += cfg.render_weight * gi;
        }
    }
    Ok(HdrLoss {
        log_term,
        bce_term,
        render_term,
        total: log_term + bce_term + cfg.render_weight * render_term,
        d_pred,
        d_attention,
    })
}
