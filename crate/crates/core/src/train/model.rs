use crate::error::{Error, Result};
use crate::field::{encode_gaussian_into, encode_pe_into, encoded_len, frustum_gaussian};
use crate::net::{Activation, Checkpoint, Matrix, MlpConfig, MlpOutput, ParamStore, RadianceMlp, Real, Tape};
use crate::render::{FieldQuery, FieldSample};
use crate::rng::{stream, Purpose};

/// Architecture and encoding of a radiance field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    pub skip: Option<usize>,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub bg_levels: usize,
    /// Integrated (frustum) encoding for foreground points; plain otherwise.
    pub integrated: bool,
    /// One network for both foreground and background.
    pub shared: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            depth: 8,
            width: 256,
            skip: Some(4),
            pos_levels: crate::field::DEFAULT_POSITION_LEVELS,
            dir_levels: crate::field::DEFAULT_DIRECTION_LEVELS,
            bg_levels: crate::field::DEFAULT_POSITION_LEVELS,
            integrated: true,
            shared: false,
        }
    }
}

impl FieldConfig {
    pub fn fg_dim(&self) -> usize {
        encoded_len(3, self.pos_levels, true)
    }

    pub fn bg_dim(&self) -> usize {
        encoded_len(4, self.bg_levels, true)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.dir_levels, true)
    }

    fn mlp(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            depth: self.depth,
            width: self.width,
            input_dim,
            dir_dim: self.dir_dim(),
            skip: self.skip.filter(|&s| s > 0 && s < self.depth),
            activation: Activation::Relu,
        }
    }

    pub fn header(&self) -> Vec<(String, String)> {
        let skip = self.skip.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        [
            ("kind", "radiance-field".to_string()),
            ("depth", self.depth.to_string()),
            ("width", self.width.to_string()),
            ("skip", skip),
            ("pos_levels", self.pos_levels.to_string()),
            ("dir_levels", self.dir_levels.to_string()),
            ("bg_levels", self.bg_levels.to_string()),
            ("integrated", self.integrated.to_string()),
            ("shared", self.shared.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind") != Some("radiance-field") {
            return Err(Error::format("checkpoint does not hold a radiance field"));
        }
        let skip = match ck.require("skip")? {
            "none" => None,
            _ => Some(ck.parse("skip")?),
        };
        Ok(FieldConfig {
            depth: ck.parse("depth")?,
            width: ck.parse("width")?,
            skip,
            pos_levels: ck.parse("pos_levels")?,
            dir_levels: ck.parse("dir_levels")?,
            bg_levels: ck.parse("bg_levels")?,
            integrated: ck.parse("integrated")?,
            shared: ck.parse("shared")?,
        })
    }
}

/// Foreground and background radiance networks with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField<T> {
    pub config: FieldConfig,
    fg: RadianceMlp,
    bg: RadianceMlp,
    pub store: ParamStore<T>,
}

/// Encoded network inputs for a list of field samples.
pub struct EncodedSamples<T> {
    pub fg_index: Vec<usize>,
    pub fg_points: Matrix<T>,
    pub fg_dirs: Matrix<T>,
    pub bg_index: Vec<usize>,
    pub bg_points: Matrix<T>,
    pub bg_dirs: Matrix<T>,
}

pub struct FieldOutputs {
    pub fg: Option<MlpOutput>,
    pub bg: Option<MlpOutput>,
}

impl<T: Real> RadianceField<T> {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let (fg, bg) = if config.shared {
            let m = RadianceMlp::new(config.mlp(config.fg_dim() + config.bg_dim()), &mut store, &mut rng)?;
            (m.clone(), m)
        } else {
            let fg = RadianceMlp::new(config.mlp(config.fg_dim()), &mut store, &mut rng)?;
            let bg = RadianceMlp::new(config.mlp(config.bg_dim()), &mut store, &mut rng)?;
            (fg, bg)
        };
        Ok(RadianceField { config, fg, bg, store })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = FieldConfig::from_checkpoint(ck)?;
        let mut field = RadianceField::new(config, 0)?;
        if ck.store.len() != field.store.len() {
            return Err(Error::format(format!(
                "checkpoint has {} parameters, architecture needs {}",
                ck.store.len(),
                field.store.len()
            )));
        }
        field.store = ck.store.cast();
        Ok(field)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.config.header(), &self.store)
    }

    pub fn encode(&self, samples: &[FieldSample]) -> Result<EncodedSamples<T>> {
        let c = &self.config;
        let (fd, bd, dd) = (c.fg_dim(), c.bg_dim(), c.dir_dim());
        let (fg_width, bg_width) = if c.shared { (fd + bd, fd + bd) } else { (fd, bd) };
        let mut fg_index = Vec::new();
        let mut bg_index = Vec::new();
        let (mut fp, mut fdirs, mut bp, mut bdirs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut row = Vec::with_capacity(fd.max(bd));
        for (k, s) in samples.iter().enumerate() {
            row.clear();
            match s {
                FieldSample::Fg { cone, t0, t1 } => {
                    if c.integrated {
                        let (mean, var) = frustum_gaussian(cone, *t0, *t1)?;
                        encode_gaussian_into(&mean.to_array(), &var.to_array(), c.pos_levels, &mut row);
                    } else {
                        let p = cone.ray.at(0.5 * (t0 + t1));
                        encode_pe_into(&p.to_array(), c.pos_levels, &mut row);
                    }
                    fp.extend(row.iter().map(|&v| T::of(v)));
                    if c.shared {
                        fp.extend(std::iter::repeat(T::zero()).take(bd));
                    }
                    row.clear();
                    encode_pe_into(&cone.ray.direction.to_array(), c.dir_levels, &mut row);
                    fdirs.extend(row.iter().map(|&v| T::of(v)));
                    fg_index.push(k);
                }
                FieldSample::Bg { dir, point } => {
                    if c.shared {
                        bp.extend(std::iter::repeat(T::zero()).take(fd));
                    }
                    encode_pe_into(&point.quad(), c.bg_levels, &mut row);
                    bp.extend(row.iter().map(|&v| T::of(v)));
                    row.clear();
                    encode_pe_into(&dir.to_array(), c.dir_levels, &mut row);
                    bdirs.extend(row.iter().map(|&v| T::of(v)));
                    bg_index.push(k);
                }
            }
        }
        Ok(EncodedSamples {
            fg_points: Matrix::from_vec(fg_index.len(), fg_width, fp)?,
            fg_dirs: Matrix::from_vec(fg_index.len(), dd, fdirs)?,
            bg_points: Matrix::from_vec(bg_index.len(), bg_width, bp)?,
            bg_dirs: Matrix::from_vec(bg_index.len(), dd, bdirs)?,
            fg_index,
            bg_index,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, enc: &EncodedSamples<T>) -> Result<FieldOutputs> {
        let fg = if enc.fg_index.is_empty() {
            None
        } else {
            let p = tape.input(enc.fg_points.clone())?;
            let d = tape.input(enc.fg_dirs.clone())?;
            Some(self.fg.forward(tape, &self.store, p, d)?)
        };
        let bg = if enc.bg_index.is_empty() {
            None
        } else {
            let p = tape.input(enc.bg_points.clone())?;
            let d = tape.input(enc.bg_dirs.clone())?;
            Some(self.bg.forward(tape, &self.store, p, d)?)
        };
        Ok(FieldOutputs { fg, bg })
    }

    /// `(sigma, rgb)` per sample in the original order.
    pub fn gather(tape: &Tape<T>, enc: &EncodedSamples<T>, out: &FieldOutputs, n: usize) -> Vec<(f64, [f64; 3])> {
        let mut values = vec![(0.0, [0.0; 3]); n];
        for (index, o) in [(&enc.fg_index, &out.fg), (&enc.bg_index, &out.bg)] {
            if let Some(o) = o {
                let (s, c) = (tape.value(o.sigma), tape.value(o.rgb));
                for (r, &k) in index.iter().enumerate() {
                    values[k] = (
                        s.data[r].f64(),
                        [c.data[3 * r].f64(), c.data[3 * r + 1].f64(), c.data[3 * r + 2].f64()],
                    );
                }
            }
        }
        values
    }
}

impl<T: Real> FieldQuery for RadianceField<T> {
    fn query(&self, samples: &[FieldSample]) -> Result<Vec<(f64, [f64; 3])>> {
        let enc = self.encode(samples)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &enc)?;
        Ok(Self::gather(&tape, &enc, &out, samples.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{BgPoint, ConeRay, Ray};
    use crate::geom::Vec3;

    fn small(shared: bool) -> FieldConfig {
        FieldConfig {
            depth: 3,
            width: 16,
            skip: Some(2),
            pos_levels: 3,
            dir_levels: 2,
            bg_levels: 3,
            integrated: true,
            shared,
        }
    }

    fn samples() -> Vec<FieldSample> {
        let cone = ConeRay::new(Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.6, 0.8)), 0.01);
        vec![
            FieldSample::Fg { cone, t0: 0.1, t1: 0.2 },
            FieldSample::Bg {
                dir: cone.ray.direction,
                point: BgPoint {
                    dir: cone.ray.direction,
                    inv_radius: 0.5,
                },
            },
            FieldSample::Fg { cone, t0: 0.3, t1: 0.5 },
        ]
    }

    #[test]
    fn query_keeps_sample_order() {
        for shared in [false, true] {
            let f = RadianceField::<f64>::new(small(shared), 1).unwrap();
            let all = f.query(&samples()).unwrap();
            let one = f.query(&samples()[2..]).unwrap();
            assert_eq!(all[2], one[0]);
            assert!(all.iter().all(|(s, c)| *s >= 0.0 && c.iter().all(|&v| v >= 0.0)));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = RadianceField::<f32>::new(small(false), 4).unwrap();
        let ck = Checkpoint::decode(&f.to_checkpoint().encode()).unwrap();
        let g = RadianceField::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn separate_networks_have_more_parameters_than_shared() {
        let a = RadianceField::<f32>::new(small(false), 0).unwrap();
        let b = RadianceField::<f32>::new(small(true), 0).unwrap();
        assert!(a.store.len() > b.store.len());
    }
}
