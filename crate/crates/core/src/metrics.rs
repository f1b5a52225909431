//! Image quality metrics for LDR and HDR panoramas.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgio::Panorama;
use crate::synth::LUMA;

pub const DEFAULT_CEILING: f64 = 99.0;
pub const DEFAULT_LUMINANCE_SCALE: f64 = 100.0;
pub const PU_MIN_LUMINANCE: f64 = 0.005;
pub const PU_MAX_LUMINANCE: f64 = 10_000.0;

/// Perceptually uniform luminance encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PuEncoding {
    Pu21Banding,
    Pu21BandingGlare,
    Pu21Peaks,
    Pu21PeaksGlare,
    /// `log2(Y / Y_min)` on the clamped luminance range.
    Log2,
}

impl PuEncoding {
    fn coefficients(self) -> Option<[f64; 7]> {
        match self {
            PuEncoding::Pu21Banding => Some([
                1.070275272,
                0.4088273932,
                0.153224308,
                0.2520326168,
                1.063512885,
                1.14115047,
                521.4527484,
            ]),
            PuEncoding::Pu21BandingGlare => Some([
                0.353487901,
                0.3734658629,
                8.277049286e-05,
                0.9062562627,
                0.09150303166,
                0.9099517204,
                596.3148142,
            ]),
            PuEncoding::Pu21Peaks => Some([
                1.043882782,
                0.6459495343,
                0.3194584211,
                0.374025247,
                1.114783422,
                1.095360363,
                384.9217577,
            ]),
            PuEncoding::Pu21PeaksGlare => Some([
                816.885024,
                1479.463946,
                0.001253215609,
                0.9329636822,
                0.06746643971,
                1.573435413,
                419.6006374,
            ]),
            PuEncoding::Log2 => None,
        }
    }

    /// Encodes absolute luminance in cd/m².
    pub fn encode(self, y: f64) -> f64 {
        let y = y.clamp(PU_MIN_LUMINANCE, PU_MAX_LUMINANCE);
        match self.coefficients() {
            Some(p) => {
                let yp = y.powf(p[3]);
                p[6] * (((p[0] + p[1] * yp) / (1.0 + p[2] * yp)).powf(p[4]) - p[5])
            }
            None => (y / PU_MIN_LUMINANCE).log2(),
        }
    }
}

impl FromStr for PuEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pu21-banding" => Ok(PuEncoding::Pu21Banding),
            "pu21" | "pu21-banding-glare" => Ok(PuEncoding::Pu21BandingGlare),
            "pu21-peaks" => Ok(PuEncoding::Pu21Peaks),
            "pu21-peaks-glare" => Ok(PuEncoding::Pu21PeaksGlare),
            "log2" => Ok(PuEncoding::Log2),
            _ => Err(Error::Usage(format!("unknown PU encoding '{s}'"))),
        }
    }
}

impl fmt::Display for PuEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PuEncoding::Pu21Banding => "pu21-banding",
            PuEncoding::Pu21BandingGlare => "pu21-banding-glare",
            PuEncoding::Pu21Peaks => "pu21-peaks",
            PuEncoding::Pu21PeaksGlare => "pu21-peaks-glare",
            PuEncoding::Log2 => "log2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub encoding: PuEncoding,
    pub ceiling: f64,
    /// cd/m² per unit of relative radiance.
    pub luminance_scale: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            encoding: PuEncoding::Pu21BandingGlare,
            ceiling: DEFAULT_CEILING,
            luminance_scale: DEFAULT_LUMINANCE_SCALE,
        }
    }
}

fn same_dims(a: &Panorama, b: &Panorama) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64, ceiling: f64) -> f64 {
    if mse <= 0.0 {
        return ceiling;
    }
    (10.0 * (peak * peak / mse).log10()).min(ceiling)
}

fn mse(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let d: Vec<f64> = a.zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    crate::net::pairwise_sum(&d) / d.len().max(1) as f64
}

/// `10 log10(peak² / MSE)`, capped at the default ceiling.
pub fn psnr(a: &Panorama, b: &Panorama, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    let m = mse(a.data().iter().map(|&v| v as f64), b.data().iter().map(|&v| v as f64));
    Ok(psnr_from_mse(m, peak, DEFAULT_CEILING))
}

/// PSNR after mapping each channel to absolute luminance and a perceptually
/// uniform encoding; the peak is the encoding of 10 000 cd/m².
pub fn pu_psnr(a: &Panorama, b: &Panorama, cfg: &MetricConfig) -> Result<f64> {
    same_dims(a, b)?;
    if !(cfg.luminance_scale > 0.0) {
        return Err(Error::invalid("luminance scale must be positive"));
    }
    let enc = |v: f32| cfg.encoding.encode(v as f64 * cfg.luminance_scale);
    let m = mse(a.data().iter().map(|&v| enc(v)), b.data().iter().map(|&v| enc(v)));
    let peak = cfg.encoding.encode(PU_MAX_LUMINANCE);
    Ok(psnr_from_mse(m, peak, cfg.ceiling))
}

/// Display mapping used for LDR metrics: clip to `[0, 1]` then gamma 2.2.
pub fn tonemap(p: &Panorama) -> Panorama {
    p.map(|v| v.clamp(0.0, 1.0).powf(1.0 / 2.2))
}

/// Multiplier that brings the median luminance of `reference` to 0.18.
/// Images without positive luminance get 1.
pub fn display_exposure(reference: &Panorama) -> f64 {
    let mut y = luma(reference);
    y.sort_by(f64::total_cmp);
    match y.get(y.len() / 2) {
        Some(&m) if m > 0.0 => 0.18 / m,
        _ => 1.0,
    }
}

fn luma(p: &Panorama) -> Vec<f64> {
    p.data()
        .chunks_exact(3)
        .map(|c| (0..3).map(|k| LUMA[k] * c[k] as f64).sum())
        .collect()
}

/// Separable Gaussian blur: columns wrap around, rows clamp at the poles.
fn blur(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).rem_euclid(w as isize) as usize;
                s += g * img[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &g) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += g * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean single-scale SSIM of the luma of two LDR panoramas.
pub fn ssim(a: &Panorama, b: &Panorama) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    let (x, y) = (luma(a), luma(b));
    let kernel = gaussian_kernel(11, 1.5);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(&x, w, h, &kernel);
    let my = blur(&y, w, h, &kernel);
    let sxx = blur(&prod(&x, &x), w, h, &kernel);
    let syy = blur(&prod(&y, &y), w, h, &kernel);
    let sxy = blur(&prod(&x, &y), w, h, &kernel);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let map: Vec<f64> = (0..w * h)
        .map(|k| {
            let (ux, uy) = (mx[k], my[k]);
            let vx = sxx[k] - ux * ux;
            let vy = syy[k] - uy * uy;
            let cxy = sxy[k] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(crate::net::pairwise_sum(&map) / map.len() as f64)
}

/// Per-row weights proportional to the pixel solid angle, summing to one
/// over the image.
fn row_weights(width: usize, height: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..height).map(|j| crate::geom::pixel_cell_solid_angle(j, width, height)).collect();
    let total: f64 = raw.iter().sum::<f64>() * width as f64;
    raw.into_iter().map(|v| v / total).collect()
}

/// Squared error of `log(1 + x)` per pixel, averaged over channels.
pub fn log_error_map(pred: &Panorama, target: &Panorama) -> Result<Vec<f64>> {
    same_dims(pred, target)?;
    Ok(pred
        .data()
        .chunks_exact(3)
        .zip(target.data().chunks_exact(3))
        .map(|(p, t)| {
            (0..3)
                .map(|c| ((p[c] as f64).ln_1p() - (t[c] as f64).ln_1p()).powi(2))
                .sum::<f64>()
                / 3.0
        })
        .collect())
}

/// Solid-angle weighted PSNR in `log(1 + x)` space; the peak is the largest
/// log value of the target.
pub fn log_psnr(pred: &Panorama, target: &Panorama) -> Result<f64> {
    let e = log_error_map(pred, target)?;
    let (w, h) = (target.width(), target.height());
    let rw = row_weights(w, h);
    let weighted: Vec<f64> = e.iter().enumerate().map(|(k, v)| v * rw[k / w]).collect();
    let m = crate::net::pairwise_sum(&weighted);
    let peak = (target.max_value() as f64).ln_1p();
    if peak <= 0.0 {
        return Err(Error::invalid("log-PSNR needs a target with positive radiance"));
    }
    Ok(psnr_from_mse(m, peak, DEFAULT_CEILING))
}

/// Number of pixels whose squared log error exceeds `factor` times the
/// median squared log error of the image.
pub fn log_outliers(pred: &Panorama, target: &Panorama, factor: f64) -> Result<usize> {
    let e = log_error_map(pred, target)?;
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(e.iter().filter(|&&v| v > factor * median).count())
}
