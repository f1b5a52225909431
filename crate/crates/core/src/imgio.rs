//! Panorama, mask, pose and manifest file formats.
//!
//! * PFM: `PF\n{W} {H}\n{scale}\n` followed by float32 RGB triplets, bottom
//!   row first. A negative scale means little endian.
//! * PGM: binary `P5`, maxval 255; 0 keeps a pixel, 255 excludes it.
//! * Pose list: one `id tx ty tz qw qx qy qz` line per frame.
//! * Manifest: `key value...` lines, see [`DatasetManifest`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::{pixel_to_sph, PixelCoord, Quat, Vec3};

/// Equirectangular RGB raster of linear radiance, row-major, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Panorama {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "expected {} values for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite radiance {v}")));
        }
        if let Some(v) = data.iter().find(|v| **v < 0.0) {
            return Err(Error::invalid(format!("negative radiance {v}")));
        }
        Ok(Panorama {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize) -> Self {
        let height = width / 2;
        Panorama {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn constant(width: usize, rgb: [f32; 3]) -> Self {
        Panorama::from_fn(width, |_, _| rgb)
    }

    /// Builds a panorama of the given width from a per-pixel function.
    ///
    /// Panics when the generated values are negative or non-finite.
    pub fn from_fn(width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let height = width / 2;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Panorama::new(width, height, data).expect("invalid generated panorama")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// Sets one pixel. Negative or non-finite values are clamped to 0.
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let k = (y * self.width + x) * 3;
        for c in 0..3 {
            let v = rgb[c];
            self.data[k + c] = if v.is_finite() && v > 0.0 { v } else { 0.0 };
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Panorama {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let r = f(v);
                if r.is_finite() && r > 0.0 {
                    r
                } else {
                    0.0
                }
            })
            .collect();
        Panorama {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear lookup with azimuthal wraparound, clamped at the poles.
    pub fn sample_bilinear(&self, p: PixelCoord) -> [f32; 3] {
        let (w, h) = (self.width as i64, self.height as i64);
        let fx = p.i * self.width as f64 - 0.5;
        let fy = (p.j * self.height as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let xa = (x0 as i64).rem_euclid(w) as usize;
        let xb = (x0 as i64 + 1).rem_euclid(w) as usize;
        let ya = y0 as usize;
        let yb = (y0 as i64 + 1).min(h - 1) as usize;
        let (a, b, c, d) = (self.get(xa, ya), self.get(xb, ya), self.get(xa, yb), self.get(xb, yb));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - tx) + b[k] * tx;
            let bot = c[k] * (1.0 - tx) + d[k] * tx;
            out[k] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Area-average resampling to a smaller width (height follows).
    pub fn downsample(&self, width: usize) -> Result<Panorama> {
        check_dims(width, width / 2)?;
        if width > self.width {
            return Err(Error::dim("downsample target is larger than the source"));
        }
        let height = width / 2;
        let mut acc = vec![0.0f64; width * height * 3];
        let mut count = vec![0u32; width * height];
        for y in 0..self.height {
            let ty = y * height / self.height;
            for x in 0..self.width {
                let tx = x * width / self.width;
                let t = ty * width + tx;
                count[t] += 1;
                let px = self.get(x, y);
                for c in 0..3 {
                    acc[t * 3 + c] += px[c] as f64;
                }
            }
        }
        let data = acc
            .iter()
            .enumerate()
            .map(|(k, v)| (v / count[k / 3].max(1) as f64) as f32)
            .collect();
        Panorama::new(width, height, data)
    }

    /// Rotates the panorama about the vertical axis by a whole number of columns.
    pub fn roll(&self, columns: isize) -> Panorama {
        let w = self.width as isize;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (x as isize - columns).rem_euclid(w) as usize;
                let k = (y * self.width + x) * 3;
                let s = (y * self.width + src) * 3;
                out.data[k..k + 3].copy_from_slice(&self.data[s..s + 3]);
            }
        }
        out
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || width % 2 != 0 || height * 2 != width {
        return Err(Error::dim(format!(
            "panorama must be 2:1 with even width, got {width}x{height}"
        )));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a temporary sibling and rename so readers never see partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Splits the first `n` whitespace-terminated header tokens off a binary file.
fn header_tokens(bytes: &[u8], n: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut pos = 0;
    while tokens.len() < n {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(Error::format("missing payload"));
    }
    Ok((tokens, pos + 1))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Panorama> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0] != "PF" {
        return Err(Error::format(format!("bad PFM magic '{}'", tokens[0])));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PFM dimension '{s}'")))
    };
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format(format!("bad PFM scale '{}'", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM scale must be nonzero"));
    }
    check_dims(width, height)?;
    let little_endian = scale < 0.0;
    let n = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() != n * 4 {
        return Err(Error::format(format!(
            "PFM payload has {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let mut data = vec![0.0f32; n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        if v.is_nan() {
            return Err(Error::format("NaN in PFM payload"));
        }
        // file rows run bottom to top
        let file_row = k / (width * 3);
        let rest = k % (width * 3);
        data[(height - 1 - file_row) * width * 3 + rest] = v;
    }
    Panorama::new(width, height, data)
}

pub fn encode_pfm(pano: &Panorama) -> Vec<u8> {
    encode_pfm_raw(pano.width, pano.height, &pano.data)
}

fn encode_pfm_raw(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * 3;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Plain RGB raster of any aspect ratio, row-major from the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn encode_pfm(&self) -> Vec<u8> {
        encode_pfm_raw(self.width, self.height, &self.data)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_pfm())
    }
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Panorama> {
    let path = path.as_ref();
    decode_pfm(&read_bytes(path)?).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

pub fn write_pfm(pano: &Panorama, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pfm(pano))
}

/// Per-pixel exclusion flags; `true` pixels are ignored by the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim("mask data length does not match dimensions"));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn none(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Excludes a cap of the given angular radius around the downward pole.
    pub fn nadir_cap(width: usize, height: usize, radius: f64) -> Self {
        let mut m = Mask::none(width, height);
        for y in 0..height {
            let p = PixelCoord {
                i: 0.5,
                j: (y as f64 + 0.5) / height as f64,
            };
            let from_nadir = pixel_to_sph(p).elevation + std::f64::consts::FRAC_PI_2;
            if from_nadir < radius {
                for x in 0..width {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, excluded: bool) {
        self.data[y * self.width + x] = excluded;
    }

    pub fn excluded_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0] != "P5" {
        return Err(Error::format(format!("bad PGM magic '{}'", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PGM header field '{s}'")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format("PGM maxval must be 255"));
    }
    let payload = &bytes[offset..];
    if payload.len() != width * height {
        return Err(Error::format("PGM payload size mismatch"));
    }
    let data = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::format(format!("non-binary mask value {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(width, height, data)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_pgm(&read_bytes(path.as_ref())?)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(mask))
}

/// Camera pose: position and camera-to-world rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub frame_id: String,
    pub position: Vec3,
    pub orientation: Quat,
}

impl Pose {
    pub fn new(frame_id: impl Into<String>, position: Vec3, orientation: Quat) -> Self {
        Pose {
            frame_id: frame_id.into(),
            position,
            orientation,
        }
    }

    pub fn identity(frame_id: impl Into<String>) -> Self {
        Pose::new(frame_id, Vec3::ZERO, Quat::IDENTITY)
    }

    /// Parses `tx ty tz qw qx qy qz` (the id is supplied separately).
    pub fn parse_fields(frame_id: &str, fields: &[&str]) -> Result<Self> {
        if fields.len() != 7 {
            return Err(Error::format(format!(
                "pose '{frame_id}' needs 7 numbers, got {}",
                fields.len()
            )));
        }
        let mut v = [0.0f64; 7];
        for (slot, s) in v.iter_mut().zip(fields) {
            let x: f64 = s
                .parse()
                .map_err(|_| Error::format(format!("pose '{frame_id}': bad number '{s}'")))?;
            if !x.is_finite() {
                return Err(Error::format(format!("pose '{frame_id}': non-finite number")));
            }
            *slot = x;
        }
        let q = Quat::new(v[3], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(Error::format(format!(
                "pose '{frame_id}': quaternion not unit (norm {})",
                q.norm()
            )));
        }
        Ok(Pose::new(frame_id, Vec3::new(v[0], v[1], v[2]), q.normalized()))
    }

    pub fn to_line(&self) -> String {
        let (p, q) = (self.position, self.orientation);
        format!(
            "{} {} {} {} {} {} {} {}",
            self.frame_id, p.x, p.y, p.z, q.w, q.x, q.y, q.z
        )
    }

    /// Applies the scene normalization `(p - center) * scale`.
    pub fn normalized(&self, center: Vec3, scale: f64) -> Pose {
        Pose::new(
            self.frame_id.clone(),
            (self.position - center) * scale,
            self.orientation,
        )
    }
}

pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::format(format!(
                "pose line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        poses.push(Pose::parse_fields(fields[0], &fields[1..])?);
    }
    Ok(poses)
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn write_poses(poses: &[Pose], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&p.to_line());
        text.push('\n');
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// One supervised (or held-out) view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub pano_path: PathBuf,
    /// Pose in normalized scene coordinates.
    pub pose: Pose,
    pub mask_path: Option<PathBuf>,
}

/// Validated dataset description.
///
/// Text format, one record per line, `#` comments:
///
/// ```text
/// poses poses.txt
/// center 0.1 0.0 -0.2
/// scale 0.8
/// gamma 2.2
/// view views/train_000.pfm f000 masks/train_000.pgm
/// ```
///
/// `gamma` marks gamma-encoded LDR views; without it views are linear HDR.
/// An optional `exposure m` line records the capture multiplier.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub center: Vec3,
    pub scale: f64,
    pub gamma: Option<f64>,
    /// Exposure multiplier the views were captured with.
    pub exposure: f64,
    pub views: Vec<ViewEntry>,
}

impl DatasetManifest {
    pub fn empty() -> Self {
        DatasetManifest {
            center: Vec3::ZERO,
            scale: 1.0,
            gamma: None,
            exposure: 1.0,
            views: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn load_view(&self, k: usize) -> Result<(Panorama, Option<Mask>)> {
        let v = &self.views[k];
        let pano = read_pfm(&v.pano_path)?;
        let mask = match &v.mask_path {
            Some(p) => {
                let m = read_mask(p)?;
                if m.width() != pano.width() || m.height() != pano.height() {
                    return Err(Error::dim(format!("mask {} does not match its panorama", p.display())));
                }
                Some(m)
            }
            None => None,
        };
        Ok((pano, mask))
    }

    /// View `k` as linear scene radiance: gamma-decoded and divided by the
    /// exposure multiplier.
    pub fn load_radiance(&self, k: usize) -> Result<(Panorama, Option<Mask>)> {
        let (pano, mask) = self.load_view(k)?;
        let e = self.exposure;
        let pano = match self.gamma {
            Some(g) => pano.map(|v| ((v.min(1.0) as f64).powf(g) / e) as f32),
            None if e != 1.0 => pano.map(|v| (v as f64 / e) as f32),
            None => pano,
        };
        Ok((pano, mask))
    }
}

struct RawView {
    pano: String,
    pose_id: String,
    mask: Option<String>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |s: &str| {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut manifest = DatasetManifest::empty();
    let mut pose_file = None;
    let mut raw = Vec::new();
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(format!("manifest: bad number '{s}'")))
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(format!("manifest line {}: malformed '{line}'", lineno + 1));
        match (f[0], f.len()) {
            ("poses", 2) => pose_file = Some(resolve(f[1])),
            ("center", 4) => manifest.center = Vec3::new(num(f[1])?, num(f[2])?, num(f[3])?),
            ("scale", 2) => {
                manifest.scale = num(f[1])?;
                if manifest.scale <= 0.0 {
                    return Err(Error::format("manifest: scale must be positive"));
                }
            }
            ("gamma", 2) => manifest.gamma = Some(num(f[1])?),
            ("exposure", 2) => {
                manifest.exposure = num(f[1])?;
                if manifest.exposure <= 0.0 {
                    return Err(Error::format("manifest: exposure must be positive"));
                }
            }
            ("view", 3) | ("view", 4) => raw.push(RawView {
                pano: f[1].to_string(),
                pose_id: f[2].to_string(),
                mask: f.get(3).map(|s| s.to_string()),
            }),
            _ => return Err(bad()),
        }
    }
    if raw.is_empty() {
        return Ok(manifest);
    }
    let pose_file = pose_file.ok_or_else(|| Error::format("manifest lists views but no pose file"))?;
    let poses = read_poses(&pose_file)?;
    for r in raw {
        let pose = poses
            .iter()
            .find(|p| p.frame_id == r.pose_id)
            .ok_or_else(|| Error::format(format!("pose id '{}' not in {}", r.pose_id, pose_file.display())))?;
        let pano_path = resolve(&r.pano);
        if !pano_path.is_file() {
            return Err(Error::format(format!("missing panorama {}", pano_path.display())));
        }
        let mask_path = r.mask.as_deref().map(resolve);
        if let Some(m) = &mask_path {
            if !m.is_file() {
                return Err(Error::format(format!("missing mask {}", m.display())));
            }
        }
        let pose = pose.normalized(manifest.center, manifest.scale);
        if pose.position.norm() >= 1.0 {
            return Err(Error::invalid(format!(
                "pose '{}' lies outside the unit sphere after normalization",
                pose.frame_id
            )));
        }
        manifest.views.push(ViewEntry {
            pano_path,
            pose,
            mask_path,
        });
    }
    Ok(manifest)
}

/// Writes a manifest whose paths are given relative to its directory.
pub fn write_manifest_text(
    path: impl AsRef<Path>,
    pose_file: &str,
    center: Vec3,
    scale: f64,
    gamma: Option<f64>,
    exposure: f64,
    views: &[(String, String, Option<String>)],
) -> Result<()> {
    let mut s = format!(
        "poses {pose_file}\ncenter {} {} {}\nscale {scale}\n",
        center.x, center.y, center.z
    );
    if let Some(g) = gamma {
        s.push_str(&format!("gamma {g}\n"));
    }
    if exposure != 1.0 {
        s.push_str(&format!("exposure {exposure}\n"));
    }
    for (pano, id, mask) in views {
        match mask {
            Some(m) => s.push_str(&format!("view {pano} {id} {m}\n")),
            None => s.push_str(&format!("view {pano} {id}\n")),
        }
    }
    write_atomic(path.as_ref(), s.as_bytes())
}
