//! Small encoder-decoder with a luminance attention stream.
//!
//! The network predicts a per-channel log boost `h`; the output is
//! `y = lin * exp(m * softplus(h))` where `m` is the saturation mask of the
//! input, so unsaturated pixels pass through unchanged.

use rayon::prelude::*;

use super::{augment, augment_with, loss_hdr, saturation_mask, AugmentParams, HdrLossConfig};
use crate::error::{Error, Result};
use crate::imgio::Panorama;
use crate::net::{reduce_gradients, AdamConfig, Checkpoint, ImgShape, Matrix, ParamRef, ParamStore, Real, Tape, Var};
use crate::prt::TransportMatrix;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnedConfig {
    pub widths: [usize; 4],
    pub attention_width: usize,
    /// Threshold of the saturation mask that enables the boost.
    pub tau: f64,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        LearnedConfig {
            widths: [16, 32, 64, 128],
            attention_width: 8,
            tau: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamRef,
    b: ParamRef,
}

impl Conv {
    fn new<T: Real>(store: &mut ParamStore<T>, cin: usize, cout: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = 1.0 / ((9 * cin) as f64).sqrt();
        Conv {
            w: store.alloc_uniform(9 * cin, cout, bound, rng),
            b: store.alloc_const(1, cout, 0.0),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, shape: ImgShape) -> Result<Var> {
        let w = self.w.on(tape, store)?;
        let b = self.b.on(tape, store)?;
        tape.conv3x3(x, w, b, shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedModel<T> {
    pub config: LearnedConfig,
    enc: [Conv; 4],
    dec: [Conv; 3],
    att: [Conv; 2],
    out: Conv,
    pub store: ParamStore<T>,
}

/// Tape handles of one forward pass.
pub struct LearnedOutput {
    pub hdr: Var,
    pub attention: Var,
}

impl<T: Real> LearnedModel<T> {
    pub fn new(config: LearnedConfig, seed: u64) -> Result<Self> {
        if config.widths.iter().any(|&w| w == 0) || config.attention_width == 0 {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if !(config.tau > 0.0 && config.tau < 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1)"));
        }
        let mut rng = stream(seed, Purpose::Init, 1);
        let mut store = ParamStore::new();
        let w = config.widths;
        let enc = [
            Conv::new(&mut store, 3, w[0], &mut rng),
            Conv::new(&mut store, w[0], w[1], &mut rng),
            Conv::new(&mut store, w[1], w[2], &mut rng),
            Conv::new(&mut store, w[2], w[3], &mut rng),
        ];
        let dec = [
            Conv::new(&mut store, w[3] + w[2], w[2], &mut rng),
            Conv::new(&mut store, w[2] + w[1], w[1], &mut rng),
            Conv::new(&mut store, w[1] + w[0], w[0], &mut rng),
        ];
        let att = [
            Conv::new(&mut store, 3, config.attention_width, &mut rng),
            Conv::new(&mut store, config.attention_width, 1, &mut rng),
        ];
        let out = Conv::new(&mut store, w[0], 3, &mut rng);
        Ok(LearnedModel {
            config,
            enc,
            dec,
            att,
            out,
            store,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, lin: &Panorama) -> Result<LearnedOutput> {
        let (w, h) = (lin.width(), lin.height());
        if w % 8 != 0 || h % 8 != 0 {
            return Err(Error::dim(format!("learned model needs sizes divisible by 8, got {w}x{h}")));
        }
        let s0 = ImgShape::new(1, h, w);
        let (s1, s2, s3) = (s0.half(), s0.half().half(), s0.half().half().half());
        let st = &self.store;
        let x = tape.input(Matrix::from_vec(s0.pixels(), 3, lin.data().iter().map(|&v| T::of(v as f64)).collect())?)?;
        let mask = saturation_mask(&lin.map(|v| v.min(1.0)), self.config.tau)?;
        let m3: Vec<T> = mask.data.iter().flat_map(|&m| [T::of(m as f64); 3]).collect();
        let m = tape.input(Matrix::from_vec(s0.pixels(), 3, m3)?)?;

        let c = self.enc[0].apply(tape, st, x, s0)?;
        let e1 = tape.relu(c)?;
        let d = tape.down2(e1, s0)?;
        let c = self.enc[1].apply(tape, st, d, s1)?;
        let e2 = tape.relu(c)?;
        let d = tape.down2(e2, s1)?;
        let c = self.enc[2].apply(tape, st, d, s2)?;
        let e3 = tape.relu(c)?;
        let d = tape.down2(e3, s2)?;
        let c = self.enc[3].apply(tape, st, d, s3)?;
        let e4 = tape.relu(c)?;

        let u = tape.up2(e4, s3)?;
        let u = tape.concat(u, e3)?;
        let c = self.dec[0].apply(tape, st, u, s2)?;
        let d3 = tape.relu(c)?;
        let u = tape.up2(d3, s2)?;
        let u = tape.concat(u, e2)?;
        let c = self.dec[1].apply(tape, st, u, s1)?;
        let d2 = tape.relu(c)?;
        let u = tape.up2(d2, s1)?;
        let u = tape.concat(u, e1)?;
        let c = self.dec[2].apply(tape, st, u, s0)?;
        let d1 = tape.relu(c)?;

        let a = self.att[0].apply(tape, st, x, s0)?;
        let a = tape.relu(a)?;
        let a = self.att[1].apply(tape, st, a, s0)?;
        let attention = tape.sigmoid(a)?;
        let gated = tape.mul_col(d1, attention)?;

        let hlog = self.out.apply(tape, st, gated, s0)?;
        let sp = tape.softplus(hlog)?;
        let e = tape.mul(m, sp)?;
        let boost = tape.exp(e)?;
        let hdr = tape.mul(x, boost)?;
        Ok(LearnedOutput { hdr, attention })
    }

    /// HDR estimate from a linearized LDR panorama.
    pub fn apply(&self, lin: &Panorama) -> Result<Panorama> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, lin)?;
        let y = tape.value(out.hdr);
        Panorama::new(lin.width(), lin.height(), y.data.iter().map(|v| v.f64() as f32).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let w = self.config.widths;
        let header = vec![
            ("kind".to_string(), "ldr2hdr".to_string()),
            ("widths".to_string(), format!("{},{},{},{}", w[0], w[1], w[2], w[3])),
            ("attention_width".to_string(), self.config.attention_width.to_string()),
            ("tau".to_string(), self.config.tau.to_string()),
        ];
        Checkpoint::new(header, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind") != Some("ldr2hdr") {
            return Err(Error::format("checkpoint does not hold an LDR2HDR model"));
        }
        let widths: Vec<usize> = ck
            .require("widths")?
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format("malformed widths"))?;
        if widths.len() != 4 {
            return Err(Error::format("expected four widths"));
        }
        let config = LearnedConfig {
            widths: [widths[0], widths[1], widths[2], widths[3]],
            attention_width: ck.parse("attention_width")?,
            tau: ck.parse("tau")?,
        };
        let mut model = LearnedModel::new(config, 0)?;
        if model.store.len() != ck.store.len() {
            return Err(Error::format("parameter count does not match the architecture"));
        }
        model.store = ck.store.cast();
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ldr2HdrTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Training resolution (width; height is half).
    pub width: usize,
    pub loss: HdrLossConfig,
    /// Random augmentations; otherwise only the median normalization.
    pub augment: bool,
    pub model: LearnedConfig,
}

impl Default for Ldr2HdrTrainConfig {
    fn default() -> Self {
        Ldr2HdrTrainConfig {
            iterations: 2000,
            batch: 4,
            adam: AdamConfig::default(),
            seed: 0,
            width: 32,
            loss: HdrLossConfig::default(),
            augment: true,
            model: LearnedConfig::default(),
        }
    }
}

/// Input and target of one training example.
pub fn training_pair(pano: &Panorama, cfg: &Ldr2HdrTrainConfig, index: u64) -> Result<(Panorama, Panorama)> {
    let small = if pano.width() != cfg.width {
        pano.downsample(cfg.width)?
    } else {
        pano.clone()
    };
    let mut rng = stream(cfg.seed, Purpose::Augment, index);
    if cfg.augment {
        augment(&small, &mut rng)
    } else {
        let p = AugmentParams {
            gamma2: Some(0.0),
            ..AugmentParams::identity()
        };
        augment_with(&small, &p, &mut rng)
    }
}

fn example_gradient<T: Real>(
    model: &LearnedModel<T>,
    input: &Panorama,
    target: &Panorama,
    transport: Option<&TransportMatrix>,
    loss_cfg: &HdrLossConfig,
    scale: f64,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, input)?;
    let pred: Vec<f64> = tape.value(out.hdr).data.iter().map(|v| v.f64()).collect();
    let att: Vec<f64> = tape.value(out.attention).data.iter().map(|v| v.f64()).collect();
    let loss = loss_hdr(&pred, target, Some(&att), transport, loss_cfg)?;
    let n = input.pixels();
    let dy = Matrix::from_f64(n, 3, &loss.d_pred.iter().map(|g| g * scale).collect::<Vec<_>>())?;
    let da = Matrix::from_f64(n, 1, &loss.d_attention.iter().map(|g| g * scale).collect::<Vec<_>>())?;
    let grads = tape.backward(&[(out.hdr, &dy), (out.attention, &da)], model.store.len())?;
    Ok((loss.total, grads.params))
}

/// Trains the learned model on HDR panoramas. Returns the model and the
/// mean batch loss of every iteration.
pub fn train_ldr2hdr(
    hdr: &[Panorama],
    transport: Option<&TransportMatrix>,
    cfg: &Ldr2HdrTrainConfig,
) -> Result<(LearnedModel<f32>, Vec<f64>)> {
    if hdr.is_empty() {
        return Err(Error::invalid("no training panoramas"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    let mut model = LearnedModel::<f32>::new(cfg.model, cfg.seed)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let parts = (0..cfg.batch)
            .into_par_iter()
            .map(|b| {
                let index = (it * cfg.batch + b) as u64;
                let mut pick = stream(cfg.seed, Purpose::Batch, index);
                let k = rand::Rng::gen_range(&mut pick, 0..hdr.len());
                let (input, target) = training_pair(&hdr[k], cfg, index)?;
                example_gradient(&model, &input, &target, transport, &cfg.loss, 1.0 / cfg.batch as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite LDR2HDR loss at iteration {it}")));
        }
        let grads = reduce_gradients(parts.into_iter().map(|p| p.1).collect());
        model.store.adam_step(&grads, &cfg.adam)?;
        losses.push(loss);
    }
    Ok((model, losses))
}
