//! Radiance field training: masked log-space loss over sampled ray batches,
//! the linear-loss and planar-sampling ablations, and held-out evaluation.

mod model;

pub use model::{EncodedSamples, FieldConfig, FieldOutputs, RadianceField};

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{ConeRay, DEFAULT_INV_RADIUS_FLOOR};
use crate::geom::{sample_training_rays, SamplingMode, DEFAULT_BATCH_RAYS};
use crate::imgio::{DatasetManifest, Mask, Panorama, Pose};
use crate::metrics::{self, MetricConfig};
use crate::net::{reduce_gradients, write_checkpoint, AdamConfig, AdamOutcome, Checkpoint, Matrix, Real, Tape, Var};
use crate::prt::{render_rmse, TransportMatrix};
use crate::render::{
    composite, composite_backward, compose_fg_bg, field_samples, render_panorama, render_rays, CoarsePlan,
    FieldQuery, FieldSample, Intervals, RadianceEstimate, RaySamples, RenderConfig, DEFAULT_PDF_FLOOR,
};
use crate::rng::{stream, Purpose, Rng};

/// `E = ln(1 + e)`.
pub fn log_map(e: f64) -> Result<f64> {
    if !(e >= 0.0) {
        return Err(Error::invalid(format!("log map of negative radiance {e}")));
    }
    Ok(e.ln_1p())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    Log,
    Linear,
}

impl FromStr for LossSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(LossSpace::Log),
            "linear" => Ok(LossSpace::Linear),
            other => Err(Error::invalid(format!("unknown loss space '{other}'"))),
        }
    }
}

impl fmt::Display for LossSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSpace::Log => "log",
            LossSpace::Linear => "linear",
        })
    }
}

fn mapped(v: f64, space: LossSpace) -> (f64, f64) {
    match space {
        LossSpace::Log => (v.ln_1p(), 1.0 / (1.0 + v)),
        LossSpace::Linear => (v, 1.0),
    }
}

/// Squared error of one ray summed over channels, and its gradient with
/// respect to the predicted radiance.
fn ray_loss(pred: [f64; 3], target: [f64; 3], space: LossSpace) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for c in 0..3 {
        let (p, dp) = mapped(pred[c].max(0.0), space);
        let (t, _) = mapped(target[c].max(0.0), space);
        loss += (p - t) * (p - t);
        grad[c] = 2.0 * (p - t) * dp;
    }
    (loss, grad)
}

/// Mean squared difference over unmasked rays and channels; masked rays get
/// a zero gradient.
pub fn loss_nerf(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    masked: &[bool],
    space: LossSpace,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != target.len() || pred.len() != masked.len() {
        return Err(Error::dim("prediction, target and mask lengths differ"));
    }
    if pred.iter().chain(target).flatten().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("radiance must be nonnegative"));
    }
    let n = masked.iter().filter(|m| !**m).count();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let norm = 1.0 / (3 * n) as f64;
    let mut terms = Vec::with_capacity(n);
    let mut grads = vec![[0.0; 3]; pred.len()];
    for i in 0..pred.len() {
        if masked[i] {
            continue;
        }
        let (l, g) = ray_loss(pred[i], target[i], space);
        terms.push(l);
        grads[i] = g.map(|v| v * norm);
    }
    Ok((crate::net::pairwise_sum(&terms) * norm, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss_space: LossSpace,
    pub sampling: SamplingMode,
    pub batch_rays: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub field: FieldConfig,
    pub t_near: f64,
    /// Rays per work unit; fixed so results never depend on the worker count.
    pub chunk_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_space: LossSpace::Log,
            sampling: SamplingMode::Spherical,
            batch_rays: DEFAULT_BATCH_RAYS,
            n_coarse: crate::render::DEFAULT_COARSE_SAMPLES,
            n_fine: crate::render::DEFAULT_FINE_SAMPLES,
            iterations: 500_000,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 10_000,
            field: FieldConfig::default(),
            t_near: crate::render::DEFAULT_T_NEAR,
            chunk_rays: 64,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str, line: usize) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::format(format!("line {line}: bad value '{raw}' for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected 'key = value'", n + 1)))?;
            c.set(key.trim(), value.trim(), n + 1)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "loss_space" => self.loss_space = v.parse()?,
            "sampling" => self.sampling = v.parse()?,
            "batch_rays" => self.batch_rays = parse_value(key, v, line)?,
            "n_coarse" => self.n_coarse = parse_value(key, v, line)?,
            "n_fine" => self.n_fine = parse_value(key, v, line)?,
            "iterations" => self.iterations = parse_value(key, v, line)?,
            "lr" => self.adam.lr = parse_value(key, v, line)?,
            "beta1" => self.adam.beta1 = parse_value(key, v, line)?,
            "beta2" => self.adam.beta2 = parse_value(key, v, line)?,
            "eps" => self.adam.eps = parse_value(key, v, line)?,
            "seed" => self.seed = parse_value(key, v, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v, line)?,
            "depth" => self.field.depth = parse_value(key, v, line)?,
            "width" => self.field.width = parse_value(key, v, line)?,
            "skip" => {
                self.field.skip = if v == "none" {
                    None
                } else {
                    Some(parse_value(key, v, line)?)
                }
            }
            "pos_levels" => self.field.pos_levels = parse_value(key, v, line)?,
            "dir_levels" => self.field.dir_levels = parse_value(key, v, line)?,
            "bg_levels" => self.field.bg_levels = parse_value(key, v, line)?,
            "integrated" => self.field.integrated = parse_value(key, v, line)?,
            "shared" => self.field.shared = parse_value(key, v, line)?,
            "t_near" => self.t_near = parse_value(key, v, line)?,
            "chunk_rays" => self.chunk_rays = parse_value(key, v, line)?,
            other => return Err(Error::format(format!("line {line}: unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 || self.n_coarse == 0 || self.n_fine == 0 || self.chunk_rays == 0 {
            return Err(Error::invalid("batch size and sample counts must be at least 1"));
        }
        if self.field.depth == 0 || self.field.width == 0 {
            return Err(Error::invalid("network depth and width must be at least 1"));
        }
        Ok(())
    }

    pub fn render_config(&self, perturb: bool) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            t_near: self.t_near,
            inv_radius_floor: DEFAULT_INV_RADIUS_FLOOR,
            perturb,
            pdf_floor: DEFAULT_PDF_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub loss: f64,
    pub coarse: f64,
    pub fine: f64,
    pub grad_norm: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,loss,coarse,fine,grad_norm";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.iteration, self.loss, self.coarse, self.fine, self.grad_norm
        )
    }
}

/// One supervised training view held in memory as linear radiance.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub pose: Pose,
    pub radiance: Panorama,
    pub mask: Option<Mask>,
}

/// Loads every view of a manifest as linear radiance.
pub fn load_views(manifest: &DatasetManifest) -> Result<Vec<TrainingView>> {
    (0..manifest.len())
        .map(|k| {
            let (radiance, mask) = manifest.load_radiance(k)?;
            Ok(TrainingView {
                pose: manifest.views[k].pose.clone(),
                radiance,
                mask,
            })
        })
        .collect()
}

struct PassState {
    fg: Vec<RaySamples>,
    bg: Vec<RaySamples>,
    fg_est: Vec<RadianceEstimate>,
    bg_est: Vec<RadianceEstimate>,
    rgb: Vec<[f64; 3]>,
}

/// Field outputs of one pass recorded on the tape.
struct PassVars {
    enc_fg: Vec<usize>,
    enc_bg: Vec<usize>,
    vars: [Option<(Var, Var)>; 2],
    /// For every sample: (network, row).
    rows: Vec<(usize, usize)>,
}

fn run_pass<T: Real>(
    field: &RadianceField<T>,
    tape: &mut Tape<T>,
    cones: &[ConeRay],
    segments: Vec<(Intervals, Intervals)>,
) -> Result<(PassState, PassVars)> {
    let mut queries: Vec<FieldSample> = Vec::new();
    for (cone, (fg, bg)) in cones.iter().zip(&segments) {
        queries.extend(field_samples(cone, fg));
        queries.extend(field_samples(cone, bg));
    }
    let enc = field.encode(&queries)?;
    let out = field.forward(tape, &enc)?;
    let values = RadianceField::gather(tape, &enc, &out, queries.len());
    let mut rows = vec![(0, 0); queries.len()];
    for (r, &k) in enc.fg_index.iter().enumerate() {
        rows[k] = (0, r);
    }
    for (r, &k) in enc.bg_index.iter().enumerate() {
        rows[k] = (1, r);
    }
    let mut state = PassState {
        fg: Vec::new(),
        bg: Vec::new(),
        fg_est: Vec::new(),
        bg_est: Vec::new(),
        rgb: Vec::new(),
    };
    let mut k = 0;
    for (fg, bg) in segments {
        let mut take = |iv: Intervals| {
            let n = iv.len();
            let vals = &values[k..k + n];
            k += n;
            RaySamples {
                intervals: iv,
                sigma: vals.iter().map(|v| v.0).collect(),
                rgb: vals.iter().map(|v| v.1).collect(),
            }
        };
        let fs = take(fg);
        let bs = take(bg);
        let fe = composite(&fs)?;
        let be = composite(&bs)?;
        state.rgb.push(compose_fg_bg(&fe, &be));
        state.fg.push(fs);
        state.bg.push(bs);
        state.fg_est.push(fe);
        state.bg_est.push(be);
    }
    let vars = [
        out.fg.map(|o| (o.sigma, o.rgb)),
        out.bg.map(|o| (o.sigma, o.rgb)),
    ];
    Ok((
        state,
        PassVars {
            enc_fg: enc.fg_index,
            enc_bg: enc.bg_index,
            vars,
            rows,
        },
    ))
}

/// Adds the tape seeds of one pass given `dL/dC` per ray.
fn pass_seeds<T: Real>(state: &PassState, vars: &PassVars, d_rgb: &[[f64; 3]]) -> [Option<(Matrix<T>, Matrix<T>)>; 2] {
    let mut sig = [vec![0.0; vars.enc_fg.len()], vec![0.0; vars.enc_bg.len()]];
    let mut col = [vec![0.0; 3 * vars.enc_fg.len()], vec![0.0; 3 * vars.enc_bg.len()]];
    let mut k = 0;
    for i in 0..state.rgb.len() {
        let d = d_rgb[i];
        let bg_rgb = state.bg_est[i].rgb;
        let t_fg = state.fg_est[i].t_end;
        let d_tend = d[0] * bg_rgb[0] + d[1] * bg_rgb[1] + d[2] * bg_rgb[2];
        let (ds_f, dc_f) = composite_backward(&state.fg[i], &state.fg_est[i], d, d_tend);
        let (ds_b, dc_b) = composite_backward(&state.bg[i], &state.bg_est[i], d.map(|v| v * t_fg), 0.0);
        for (ds, dc) in [(ds_f, dc_f), (ds_b, dc_b)] {
            for (s, c) in ds.into_iter().zip(dc) {
                let (net, r) = vars.rows[k];
                sig[net][r] += s;
                for j in 0..3 {
                    col[net][3 * r + j] += c[j];
                }
                k += 1;
            }
        }
    }
    let mk = |net: usize| {
        let n = sig[net].len();
        if n == 0 {
            return None;
        }
        Some((
            Matrix::from_f64(n, 1, &sig[net]).expect("shape"),
            Matrix::from_f64(n, 3, &col[net]).expect("shape"),
        ))
    };
    [mk(0), mk(1)]
}

/// Loss sums (coarse, fine) and parameter gradients of one chunk of rays.
/// `norm` is the mean normalization of the whole batch.
fn chunk_step<T: Real>(
    field: &RadianceField<T>,
    rays: &[(ConeRay, [f32; 3])],
    rngs: &mut [Rng],
    rcfg: &RenderConfig,
    space: LossSpace,
    norm: f64,
) -> Result<(f64, f64, Vec<T>)> {
    let cones: Vec<ConeRay> = rays.iter().map(|r| r.0).collect();
    let targets: Vec<[f64; 3]> = rays.iter().map(|r| r.1.map(|v| v as f64)).collect();
    let plans = cones
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, rng)| CoarsePlan::new(&c.ray, rcfg, rng))
        .collect::<Result<Vec<_>>>()?;
    let coarse_iv = plans
        .iter()
        .map(|p| Ok((p.fg_intervals(&p.fg_points)?, p.bg_intervals(&p.bg_points)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let (cs, cv) = run_pass(field, &mut tape, &cones, coarse_iv)?;
    let mut fine_iv = Vec::with_capacity(cones.len());
    for i in 0..cones.len() {
        let (fpts, bpts) = plans[i].refine(
            &cs.fg_est[i].weights,
            &cs.fg[i].intervals,
            &cs.bg_est[i].weights,
            &cs.bg[i].intervals,
            rcfg,
            &mut rngs[i],
        )?;
        fine_iv.push((plans[i].fg_intervals(&fpts)?, plans[i].bg_intervals(&bpts)?));
    }
    let (fs, fv) = run_pass(field, &mut tape, &cones, fine_iv)?;

    let mut sums = [Vec::new(), Vec::new()];
    let mut seeds = Vec::new();
    for (p, (state, vars)) in [(&cs, &cv), (&fs, &fv)].into_iter().enumerate() {
        let mut d_rgb = Vec::with_capacity(rays.len());
        for i in 0..rays.len() {
            let (l, g) = ray_loss(state.rgb[i], targets[i], space);
            sums[p].push(l);
            d_rgb.push(g.map(|v| v * norm));
        }
        let s = pass_seeds::<T>(state, vars, &d_rgb);
        for (net, seed) in s.into_iter().enumerate() {
            if let (Some((ds, dc)), Some((vs, vc))) = (seed, vars.vars[net]) {
                seeds.push((vs, ds));
                seeds.push((vc, dc));
            }
        }
    }
    let seed_refs: Vec<(Var, &Matrix<T>)> = seeds.iter().map(|(v, m)| (*v, m)).collect();
    let grads = tape.backward(&seed_refs, field.store.len())?;
    Ok((
        crate::net::pairwise_sum(&sums[0]),
        crate::net::pairwise_sum(&sums[1]),
        grads.params,
    ))
}

fn ray_stream(seed: u64, iteration: u64, ray: usize) -> Rng {
    stream(seed, Purpose::Render, (iteration << 24) | ray as u64)
}

/// Loss and gradient of one batch of supervised rays.
pub fn batch_gradient<T: Real>(
    field: &RadianceField<T>,
    rays: &[(ConeRay, [f32; 3])],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<(LossReport, Vec<T>)> {
    batch_gradient_with(field, rays, cfg, iteration, &cfg.render_config(true))
}

fn batch_gradient_with<T: Real>(
    field: &RadianceField<T>,
    rays: &[(ConeRay, [f32; 3])],
    cfg: &TrainConfig,
    iteration: u64,
    rcfg: &RenderConfig,
) -> Result<(LossReport, Vec<T>)> {
    if rays.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let norm = 1.0 / (3 * rays.len()) as f64;
    let parts = rays
        .par_chunks(cfg.chunk_rays)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rngs: Vec<Rng> = (0..chunk.len())
                .map(|i| ray_stream(cfg.seed, iteration, c * cfg.chunk_rays + i))
                .collect();
            chunk_step(field, chunk, &mut rngs, rcfg, cfg.loss_space, norm)
        })
        .collect::<Result<Vec<_>>>()?;
    let coarse = crate::net::pairwise_sum(&parts.iter().map(|p| p.0).collect::<Vec<_>>()) * norm;
    let fine = crate::net::pairwise_sum(&parts.iter().map(|p| p.1).collect::<Vec<_>>()) * norm;
    let grads = reduce_gradients(parts.into_iter().map(|p| p.2).collect());
    let grad_norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    Ok((
        LossReport {
            iteration,
            loss: coarse + fine,
            coarse,
            fine,
            grad_norm,
        },
        grads,
    ))
}

/// Draws the supervised rays of one iteration from a random view.
pub fn sample_batch(views: &[TrainingView], cfg: &TrainConfig, iteration: u64) -> Result<Vec<(ConeRay, [f32; 3])>> {
    if views.is_empty() {
        return Err(Error::invalid("no training views"));
    }
    let mut rng = stream(cfg.seed, Purpose::Batch, iteration);
    let v = &views[rng.gen_range(0..views.len())];
    sample_training_rays(&v.pose, &v.radiance, v.mask.as_ref(), cfg.batch_rays, &mut rng, cfg.sampling)
}

/// Loss of a fixed ray set with deterministic (midpoint) sampling.
pub fn validation_loss<T: Real>(field: &RadianceField<T>, rays: &[(ConeRay, [f32; 3])], cfg: &TrainConfig) -> Result<f64> {
    let rcfg = cfg.render_config(false);
    let cones: Vec<ConeRay> = rays.iter().map(|r| r.0).collect();
    let mut rngs: Vec<Rng> = (0..rays.len()).map(|i| ray_stream(cfg.seed, 0, i)).collect();
    let out = render_rays(field, &cones, &rcfg, &mut rngs)?;
    let targets: Vec<[f64; 3]> = rays.iter().map(|r| r.1.map(|v| v as f64)).collect();
    let mask = vec![false; rays.len()];
    let coarse: Vec<[f64; 3]> = out.iter().map(|r| r.coarse.rgb).collect();
    let fine: Vec<[f64; 3]> = out.iter().map(|r| r.fine.rgb).collect();
    let (lc, _) = loss_nerf(&coarse, &targets, &mask, cfg.loss_space)?;
    let (lf, _) = loss_nerf(&fine, &targets, &mask, cfg.loss_space)?;
    Ok(lc + lf)
}

/// Where training writes checkpoints and loss reports.
#[derive(Default)]
pub struct TrainOutput<'a> {
    pub checkpoint: Option<PathBuf>,
    pub report: Option<&'a mut dyn Write>,
}

pub fn field_checkpoint<T: Real>(field: &RadianceField<T>, iteration: u64, cfg: &TrainConfig) -> Checkpoint {
    let mut ck = field.to_checkpoint();
    ck.header.push(("iteration".into(), iteration.to_string()));
    ck.header.push(("seed".into(), cfg.seed.to_string()));
    ck
}

fn save<T: Real>(path: &Option<PathBuf>, field: &RadianceField<T>, it: u64, cfg: &TrainConfig) -> Result<()> {
    match path {
        Some(p) => write_checkpoint(&field_checkpoint(field, it, cfg), p),
        None => Ok(()),
    }
}

/// Runs `cfg.iterations` optimizer steps starting from `field` at
/// `start_iteration` (nonzero when resuming). Returns the loss reports.
pub fn train_loop<T: Real>(
    field: &mut RadianceField<T>,
    views: &[TrainingView],
    cfg: &TrainConfig,
    start_iteration: u64,
    out: &mut TrainOutput<'_>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if let Some(w) = out.report.as_mut() {
        writeln!(w, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io("loss report", e))?;
    }
    let mut reports = Vec::new();
    for it in start_iteration..start_iteration + cfg.iterations {
        let step = sample_batch(views, cfg, it).and_then(|rays| batch_gradient(field, &rays, cfg, it));
        let (report, grads) = match step {
            Ok(r) if r.0.loss.is_finite() => r,
            Ok(_) | Err(Error::Numeric(_)) => {
                save(&out.checkpoint, field, it, cfg)?;
                return Err(Error::Numeric(format!("non-finite loss at iteration {it}")));
            }
            Err(e) => return Err(e),
        };
        if field.store.adam_step(&grads, &cfg.adam)? == AdamOutcome::Skipped {
            save(&out.checkpoint, field, it, cfg)?;
            return Err(Error::Numeric(format!("non-finite gradient at iteration {it}")));
        }
        if let Some(w) = out.report.as_mut() {
            writeln!(w, "{}", report.csv_line()).map_err(|e| Error::io("loss report", e))?;
        }
        reports.push(report);
        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save(&out.checkpoint, field, done, cfg)?;
        }
    }
    save(&out.checkpoint, field, start_iteration + cfg.iterations, cfg)?;
    Ok(reports)
}

/// Trains a fresh field on a manifest.
pub fn train_field<T: Real>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out: &mut TrainOutput<'_>,
) -> Result<(RadianceField<T>, Vec<LossReport>)> {
    let views = load_views(manifest)?;
    let mut field = RadianceField::new(cfg.field, cfg.seed)?;
    let reports = train_loop(&mut field, &views, cfg, 0, out)?;
    Ok((field, reports))
}

/// Continues training from a checkpoint written by [`train_loop`].
pub fn resume_field<T: Real>(
    manifest: &DatasetManifest,
    checkpoint: &Path,
    cfg: &TrainConfig,
    out: &mut TrainOutput<'_>,
) -> Result<(RadianceField<T>, Vec<LossReport>)> {
    let ck = crate::net::read_checkpoint(checkpoint)?;
    let start: u64 = ck.parse("iteration")?;
    let mut field = RadianceField::from_checkpoint(&ck)?;
    let views = load_views(manifest)?;
    let reports = train_loop(&mut field, &views, cfg, start, out)?;
    Ok((field, reports))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub metrics: MetricConfig,
    pub render: RenderConfig,
    /// Render width; defaults to each test panorama's width.
    pub width: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: MetricConfig::default(),
            render: RenderConfig::default(),
            width: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub view: String,
    pub pu_psnr: f64,
    pub rmse: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub log_psnr: f64,
}

#[derive(Debug, Clone)]
pub struct HeldoutEval {
    pub rows: Vec<EvalRow>,
    pub renders: Vec<Panorama>,
    pub targets: Vec<Panorama>,
}

impl HeldoutEval {
    pub fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Renders every test pose and compares against its ground-truth HDR view.
pub fn eval_heldout(
    field: &dyn FieldQuery,
    test: &DatasetManifest,
    cfg: &EvalConfig,
    transport: Option<&TransportMatrix>,
) -> Result<HeldoutEval> {
    let mut out = HeldoutEval {
        rows: Vec::new(),
        renders: Vec::new(),
        targets: Vec::new(),
    };
    for k in 0..test.len() {
        let (target, _) = test.load_radiance(k)?;
        let width = cfg.width.unwrap_or(target.width());
        let target = if width != target.width() { target.downsample(width)? } else { target };
        let pose = &test.views[k].pose;
        let pred = render_panorama(field, pose, width, &cfg.render, cfg.seed.wrapping_add(k as u64))?;
        out.rows.push(score(&pose.frame_id, &pred, &target, &cfg.metrics, transport)?);
        out.renders.push(pred);
        out.targets.push(target);
    }
    Ok(out)
}

/// Metric row for one rendered panorama against its reference.
pub fn score(
    view: &str,
    pred: &Panorama,
    target: &Panorama,
    mcfg: &MetricConfig,
    transport: Option<&TransportMatrix>,
) -> Result<EvalRow> {
    let rmse = match transport {
        Some(t) => {
            let w = t.env_width();
            Some(render_rmse(&pred.downsample(w)?, &target.downsample(w)?, t)?)
        }
        None => None,
    };
    let k = metrics::display_exposure(target) as f32;
    let (pl, tl) = (metrics::tonemap(&pred.map(|v| v * k)), metrics::tonemap(&target.map(|v| v * k)));
    Ok(EvalRow {
        view: view.to_string(),
        pu_psnr: metrics::pu_psnr(pred, target, mcfg)?,
        rmse,
        psnr: metrics::psnr(&pl, &tl, 1.0)?,
        ssim: metrics::ssim(&pl, &tl)?,
        log_psnr: metrics::log_psnr(pred, target)?,
    })
}

/// CSV table with the columns `dataset,PU-PSNR,RMSE,PSNR,SSIM`.
pub fn eval_csv(dataset: &str, eval: &HeldoutEval) -> String {
    let mut s = String::from("dataset,PU-PSNR,RMSE,PSNR,SSIM\n");
    for r in &eval.rows {
        let rmse = r.rmse.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{dataset}/{},{:.4},{rmse},{:.4},{:.4}\n",
            r.view, r.pu_psnr, r.psnr, r.ssim
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Ray;
    use crate::geom::Vec3;

    #[test]
    fn log_map_examples() {
        assert_eq!(log_map(0.0).unwrap(), 0.0);
        assert!((log_map(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(log_map(2.0).unwrap() < log_map(3.0).unwrap());
        assert!(log_map(-1.0).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = [[1.5, 0.2, 7.0]];
        assert_eq!(loss_nerf(&t, &t, &[false], LossSpace::Log).unwrap().0, 0.0);
        assert!(loss_nerf(&t, &t, &[true], LossSpace::Log).is_err());
        let e = std::f64::consts::E - 1.0;
        let (l, _) = loss_nerf(&[[0.0; 3]], &[[e; 3]], &[false], LossSpace::Log).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_rays_have_no_influence() {
        let pred = [[0.5, 1.0, 2.0], [3.0, 0.1, 0.0]];
        let target = [[0.7, 1.0, 1.0], [0.0, 9.0, 4.0]];
        let (l1, g1) = loss_nerf(&pred[..1], &target[..1], &[false], LossSpace::Log).unwrap();
        let (l2, g2) = loss_nerf(&pred, &target, &[false, true], LossSpace::Log).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1[0], g2[0]);
        assert_eq!(g2[1], [0.0; 3]);
    }

    #[test]
    fn log_loss_depends_only_on_log_values() {
        // pairs with equal log1p differences give equal losses
        let (a, b) = (1.0f64, 3.0f64);
        let shift = 0.7f64;
        let a2 = ((a.ln_1p() + shift).exp()) - 1.0;
        let b2 = ((b.ln_1p() + shift).exp()) - 1.0;
        let l1 = loss_nerf(&[[a; 3]], &[[b; 3]], &[false], LossSpace::Log).unwrap().0;
        let l2 = loss_nerf(&[[a2; 3]], &[[b2; 3]], &[false], LossSpace::Log).unwrap().0;
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn config_parsing() {
        let c = TrainConfig::parse("# comment\nbatch_rays = 32\nloss_space = linear\nsampling=planar\nwidth = 64\nlr = 5e-4\n").unwrap();
        assert_eq!(c.batch_rays, 32);
        assert_eq!(c.loss_space, LossSpace::Linear);
        assert_eq!(c.sampling, SamplingMode::Planar);
        assert_eq!(c.field.width, 64);
        assert_eq!(c.adam.lr, 5e-4);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("batch_rays = 0").is_err());
        let d = TrainConfig::default();
        assert_eq!((d.batch_rays, d.n_coarse, d.n_fine), (1024, 64, 128));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_rays: 6,
            n_coarse: 4,
            n_fine: 4,
            chunk_rays: 4,
            field: FieldConfig {
                depth: 2,
                width: 8,
                skip: None,
                pos_levels: 2,
                dir_levels: 1,
                bg_levels: 2,
                integrated: true,
                shared: false,
            },
            ..TrainConfig::default()
        }
    }

    fn rays() -> Vec<(ConeRay, [f32; 3])> {
        (0..6)
            .map(|i| {
                let a = i as f64 * 1.1;
                let d = Vec3::new(a.sin(), 0.3 * a.cos(), a.cos());
                (ConeRay::new(Ray::new(Vec3::new(0.1, 0.0, -0.2), d), 0.01), [0.5 + i as f32, 2.0, 0.1])
            })
            .collect()
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let field = RadianceField::<f64>::new(cfg.field, 3).unwrap();
        let rays = rays();
        // a dominant floor makes the fine samples independent of the weights,
        // which the gradient treats as constants
        let rcfg = RenderConfig {
            pdf_floor: 1e9,
            ..cfg.render_config(true)
        };
        let (rep, grads) = batch_gradient_with(&field, &rays, &cfg, 0, &rcfg).unwrap();
        let h = 1e-6;
        let n = field.store.len();
        for idx in [0, 7, n / 3, n / 2, n - 20, n - 1] {
            let mut p = field.clone();
            p.store.params[idx] += h;
            let mut m = field.clone();
            m.store.params[idx] -= h;
            let lp = batch_gradient_with(&p, &rays, &cfg, 0, &rcfg).unwrap().0.loss;
            let lm = batch_gradient_with(&m, &rays, &cfg, 0, &rcfg).unwrap().0.loss;
            let num = (lp - lm) / (2.0 * h);
            let err = (num - grads[idx]).abs() / num.abs().max(grads[idx].abs()).max(1e-4);
            assert!(err < 1e-4, "param {idx}: {num} vs {} (loss {})", grads[idx], rep.loss);
        }
    }

    #[test]
    fn chunking_does_not_change_the_loss() {
        let mut cfg = tiny_config();
        let field = RadianceField::<f64>::new(cfg.field, 3).unwrap();
        let rays = rays();
        let (a, ga) = batch_gradient(&field, &rays, &cfg, 2).unwrap();
        cfg.chunk_rays = 6;
        let (b, gb) = batch_gradient(&field, &rays, &cfg, 2).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
