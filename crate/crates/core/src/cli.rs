//! The `panofield` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (bad or missing
//! files, dimension mismatches, invalid values), 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::hdr::{
    fuse_exposures, linearize, train_ldr2hdr, uplift, LearnedModel, Ldr2HdrModel, Ldr2HdrTrainConfig, ParametricModel,
    ResponseCurve, DEFAULT_GAMMA,
};
use crate::imgio::{read_manifest, read_pfm, write_manifest_text, write_pfm, write_poses, DatasetManifest, Panorama, Pose};
use crate::metrics::{MetricConfig, PuEncoding};
use crate::net::{read_checkpoint, write_checkpoint};
use crate::prt::{build_transport, relight, ProbeScene, TransportMatrix, DEFAULT_ENV_WIDTH, DEFAULT_RENDER_SIZE};
use crate::render::{render_panorama, RenderConfig};
use crate::synth::{make_bracket, make_dataset, write_fused_training, BoxScene, DatasetConfig};
use crate::train::{
    eval_csv, eval_heldout, resume_field, score, train_field, EvalConfig, HeldoutEval, RadianceField, TrainConfig,
    TrainOutput,
};

pub const THREADS_ENV: &str = "RADIANCE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "panofield", version, about = "HDR radiance fields from clipped LDR panoramas")]
pub struct Cli {
    /// Seed for every random choice (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Path-trace a box-room dataset.
    Synth(SynthArgs),
    /// Merge an exposure bracket into one HDR panorama.
    Fuse(FuseArgs),
    /// Undo the camera response of an LDR panorama.
    Linearize(LinearizeArgs),
    /// Inverse-tonemap an LDR panorama or every view of a manifest.
    Uplift(UpliftArgs),
    /// Train the learned LDR to HDR model.
    TrainLdr2hdr(TrainLdr2hdrArgs),
    /// Train a radiance field on a dataset manifest.
    TrainField(TrainFieldArgs),
    /// Render an HDR panorama from a trained field.
    Render(RenderArgs),
    /// Light the probe scene with an environment panorama.
    Relight(RelightArgs),
    /// Score a trained field on held-out views.
    Eval(EvalArgs),
    /// Finite-difference check of the autodiff primitives.
    Gradcheck(GradcheckArgs),
    /// Run a full uplift/train/render pipeline in either order.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene description; the built-in room when absent.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub spp: usize,
    #[arg(long, default_value_t = 2)]
    pub bounces: u32,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Shutter exponent of the training captures (auto when absent).
    #[arg(long, allow_hyphen_values = true)]
    pub exposure_stops: Option<f64>,
    /// Photographer mask radius in radians; 0 disables the mask.
    #[arg(long, default_value_t = 0.35)]
    pub mask_radius: f64,
    /// Also write an exposure bracket of this many frames per test view.
    #[arg(long)]
    pub bracket: Option<usize>,
    /// Also write a `fused` training manifest merged from brackets of this
    /// many frames.
    #[arg(long)]
    pub fused: Option<usize>,
    /// F-stops spanned by each bracket, centered on the training exposure.
    #[arg(long, default_value_t = 22.0)]
    pub stops: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Text file with one `multiplier path` line per frame.
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LinearizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct UpliftArgs {
    /// A single LDR panorama.
    #[arg(long, conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Uplift every view of a gamma-encoded manifest into `--out` (a directory).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `parametric` or a learned-model checkpoint.
    #[arg(long, default_value = "parametric")]
    pub model: String,
    /// Response exponent (defaults to the manifest's).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainLdr2hdrArgs {
    /// Manifest whose views (as linear radiance) are the HDR training set.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Transport matrix for the rendering loss; built and cached when missing.
    #[arg(long)]
    pub transport: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub render_weight: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainFieldArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `key = value` training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override the configured iteration count.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Train in double precision.
    #[arg(long)]
    pub f64: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `tx ty tz qw qx qy qz` in normalized scene coordinates.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: String,
    /// Interpret the pose in the world frame of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = crate::render::DEFAULT_COARSE_SAMPLES)]
    pub coarse: usize,
    #[arg(long, default_value_t = crate::render::DEFAULT_FINE_SAMPLES)]
    pub fine: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RelightArgs {
    #[arg(long)]
    pub env: PathBuf,
    /// Transport matrix file; built for the default probe and cached when missing.
    #[arg(long)]
    pub transport: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Held-out manifest with linear HDR views.
    #[arg(long)]
    pub test: PathBuf,
    /// Transport matrix for the RMSE column; built and cached when missing.
    #[arg(long)]
    pub transport: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = crate::render::DEFAULT_COARSE_SAMPLES)]
    pub coarse: usize,
    #[arg(long, default_value_t = crate::render::DEFAULT_FINE_SAMPLES)]
    pub fine: usize,
    /// PU encoding: pu21-banding-glare, pu21-banding, pu21-peaks, pu21-peaks-glare or log2.
    #[arg(long, default_value = "pu21-banding-glare")]
    pub encoding: String,
    /// Label of the dataset column.
    #[arg(long, default_value = "synth")]
    pub dataset: String,
    /// Write the rendered panoramas here.
    #[arg(long)]
    pub renders: Option<PathBuf>,
    /// CSV destination (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Width of the random MLP.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// `panohdr` (uplift, then train) or `nerf-ldr2hdr` (train on LDR, then uplift renders).
    #[arg(long)]
    pub mode: PipelineMode,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `parametric` or a learned-model checkpoint.
    #[arg(long, default_value = "parametric")]
    pub model: String,
    #[arg(long)]
    pub transport: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    PanoHdr,
    NerfLdr2Hdr,
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panohdr" => Ok(PipelineMode::PanoHdr),
            "nerf-ldr2hdr" => Ok(PipelineMode::NerfLdr2Hdr),
            _ => Err(Error::Usage(format!("unknown pipeline mode '{s}'"))),
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineMode::PanoHdr => "panohdr",
            PipelineMode::NerfLdr2Hdr => "nerf-ldr2hdr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Inverse-tonemap the training captures.
    UpliftViews,
    /// Fit the radiance field to the current training views.
    TrainField,
    /// Render the held-out poses.
    Render,
    /// Inverse-tonemap the rendered panoramas.
    UpliftRenders,
}

/// Stages of each pipeline in execution order.
pub fn pipeline_order(mode: PipelineMode) -> Vec<Stage> {
    match mode {
        PipelineMode::PanoHdr => vec![Stage::UpliftViews, Stage::TrainField, Stage::Render],
        PipelineMode::NerfLdr2Hdr => vec![Stage::TrainField, Stage::Render, Stage::UpliftRenders],
    }
}

/// Process exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a thread count, got '{v}'"))),
        _ => Ok(None),
    }
}

/// Runs a parsed command inside a worker pool of the requested size.
pub fn execute(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    if threads == Some(0) {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    let seed = cli.seed;
    pool.install(|| dispatch(cli.command, seed))
}

fn dispatch(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Fuse(a) => {
            let stack = read_stack(&a.stack)?;
            write_pfm(&fuse_exposures(&stack, &ResponseCurve::gamma(a.gamma))?, &a.out)
        }
        Command::Linearize(a) => write_pfm(&linearize(&read_pfm(&a.input)?, &ResponseCurve::gamma(a.gamma))?, &a.out),
        Command::Uplift(a) => uplift_cmd(a),
        Command::TrainLdr2hdr(a) => train_ldr2hdr_cmd(a, seed.unwrap_or(0)),
        Command::TrainField(a) => train_field_cmd(a, seed),
        Command::Render(a) => render_cmd(a, seed.unwrap_or(0)),
        Command::Relight(a) => {
            let t = load_or_build_transport(&a.transport)?;
            relight(&t, &read_pfm(&a.env)?)?.write_pfm(&a.out)
        }
        Command::Eval(a) => eval_cmd(a, seed.unwrap_or(0)),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed.unwrap_or(0)),
        Command::Pipeline(a) => pipeline_cmd(a, seed),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => BoxScene::read(p)?,
        None => BoxScene::default(),
    };
    let cfg = DatasetConfig {
        n_train: a.train,
        n_test: a.test,
        width: a.width,
        seed,
        spp: a.spp,
        bounces: a.bounces,
        gamma: a.gamma,
        exposure_stops: a.exposure_stops,
        mask_radius: (a.mask_radius > 0.0).then_some(a.mask_radius),
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&scene, &cfg, &a.out)?;
    if let Some(n) = a.bracket {
        let dir = a.out.join("brackets");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, (_, hdr)) in ds.test_views.iter().enumerate() {
            let stack = make_bracket(hdr, n, a.stops, a.gamma, ds.exposure)?;
            let mut list = String::new();
            for (f, (m, frame)) in stack.frames.iter().enumerate() {
                let name = format!("test_{k:03}_{f:02}.pfm");
                write_pfm(frame, dir.join(&name))?;
                list.push_str(&format!("{m} {name}\n"));
            }
            let path = dir.join(format!("test_{k:03}.txt"));
            std::fs::write(&path, list).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(n) = a.fused {
        write_fused_training(&ds, n, a.stops, a.gamma)?;
    }
    Ok(())
}

/// Reads a bracket list: `multiplier path` per line, paths relative to the list.
pub fn read_stack(path: &Path) -> Result<crate::synth::ExposureStack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (m, p) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::format(format!("stack line {}: expected 'multiplier path'", n + 1)))?;
        let m: f64 = m
            .parse()
            .map_err(|_| Error::format(format!("stack line {}: bad multiplier '{m}'", n + 1)))?;
        frames.push((m, read_pfm(base.join(p.trim()))?));
    }
    Ok(crate::synth::ExposureStack { frames })
}

/// `parametric` or the path of a learned-model checkpoint.
pub fn load_model(source: &str) -> Result<Ldr2HdrModel> {
    if source == "parametric" {
        return Ok(Ldr2HdrModel::Parametric(ParametricModel::default()));
    }
    let ck = read_checkpoint(source)?;
    Ok(Ldr2HdrModel::Learned(LearnedModel::from_checkpoint(&ck)?))
}

fn uplift_cmd(a: UpliftArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    match (&a.input, &a.manifest) {
        (Some(input), None) => {
            let curve = ResponseCurve::gamma(a.gamma.unwrap_or(DEFAULT_GAMMA));
            write_pfm(&uplift(&model, &read_pfm(input)?, &curve)?, &a.out)
        }
        (None, Some(m)) => uplift_manifest(&read_manifest(m)?, &model, a.gamma, &a.out).map(|_| ()),
        _ => Err(Error::Usage("uplift needs exactly one of --input or --manifest".into())),
    }
}

/// Uplifts every view of a gamma-encoded manifest and writes the HDR views
/// with a new manifest (`dir/manifest`). Returns the manifest path.
pub fn uplift_manifest(m: &DatasetManifest, model: &Ldr2HdrModel, gamma: Option<f64>, dir: &Path) -> Result<PathBuf> {
    let g = gamma
        .or(m.gamma)
        .ok_or_else(|| Error::invalid("manifest views are not gamma-encoded; pass --gamma"))?;
    let curve = ResponseCurve::gamma(g);
    let views_dir = dir.join("views");
    std::fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;
    let mut poses = Vec::new();
    let mut entries = Vec::new();
    for (k, v) in m.views.iter().enumerate() {
        let (ldr, _) = m.load_view(k)?;
        let name = format!("views/uplift_{k:03}.pfm");
        write_pfm(&uplift(model, &ldr, &curve)?, dir.join(&name))?;
        let mask = v
            .mask_path
            .as_ref()
            .map(|p| std::path::absolute(p).map(|p| p.display().to_string()))
            .transpose()
            .map_err(|e| Error::io(dir, e))?;
        poses.push(v.pose.clone());
        entries.push((name, v.pose.frame_id.clone(), mask));
    }
    write_poses(&poses, dir.join("poses.txt"))?;
    let path = dir.join("manifest");
    write_manifest_text(&path, "poses.txt", Vec3::ZERO, 1.0, None, m.exposure, &entries)?;
    Ok(path)
}

/// Reads a transport matrix, or builds one for the default probe scene
/// and stores it at `path`.
pub fn load_or_build_transport(path: &Path) -> Result<TransportMatrix> {
    if path.exists() {
        return TransportMatrix::read(path);
    }
    let t = build_transport(&ProbeScene::default(), DEFAULT_RENDER_SIZE, DEFAULT_RENDER_SIZE, DEFAULT_ENV_WIDTH)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    t.write(path)?;
    Ok(t)
}

fn train_ldr2hdr_cmd(a: TrainLdr2hdrArgs, seed: u64) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    let hdr = (0..m.len())
        .map(|k| m.load_radiance(k).map(|v| v.0))
        .collect::<Result<Vec<_>>>()?;
    let transport = a.transport.as_deref().map(load_or_build_transport).transpose()?;
    let mut cfg = Ldr2HdrTrainConfig {
        iterations: a.iterations,
        batch: a.batch,
        seed,
        width: a.width,
        augment: !a.no_augment,
        ..Ldr2HdrTrainConfig::default()
    };
    cfg.adam.lr = a.lr;
    cfg.loss.render_weight = a.render_weight;
    let (model, losses) = train_ldr2hdr(&hdr, transport.as_ref(), &cfg)?;
    if let Some(last) = losses.last() {
        eprintln!("final loss {last:.6}");
    }
    write_checkpoint(&model.to_checkpoint(), &a.out)
}

fn train_config(path: Option<&Path>, seed: Option<u64>, iterations: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_field_cmd(a: TrainFieldArgs, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(a.config.as_deref(), seed, a.iterations)?;
    let manifest = read_manifest(&a.manifest)?;
    let mut report_file = match &a.report {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut out = TrainOutput {
        checkpoint: Some(a.out.clone()),
        report: report_file.as_mut().map(|w| w as &mut dyn std::io::Write),
    };
    match (&a.resume, a.f64) {
        (None, false) => train_field::<f32>(&manifest, &cfg, &mut out).map(|_| ()),
        (None, true) => train_field::<f64>(&manifest, &cfg, &mut out).map(|_| ()),
        (Some(r), false) => resume_field::<f32>(&manifest, r, &cfg, &mut out).map(|_| ()),
        (Some(r), true) => resume_field::<f64>(&manifest, r, &cfg, &mut out).map(|_| ()),
    }
}

fn load_field(path: &Path) -> Result<RadianceField<f32>> {
    RadianceField::from_checkpoint(&read_checkpoint(path)?)
}

fn parse_pose(s: &str) -> Result<Pose> {
    let fields: Vec<&str> = s.split_whitespace().collect();
    Pose::parse_fields("render", &fields).map_err(|e| Error::Usage(format!("--pose: {e}")))
}

fn render_config(coarse: usize, fine: usize) -> RenderConfig {
    RenderConfig {
        n_coarse: coarse,
        n_fine: fine,
        ..RenderConfig::default()
    }
}

fn render_cmd(a: RenderArgs, seed: u64) -> Result<()> {
    let field = load_field(&a.ckpt)?;
    let mut pose = parse_pose(&a.pose)?;
    if let Some(m) = &a.manifest {
        let m = read_manifest(m)?;
        pose = pose.normalized(m.center, m.scale);
    }
    let pano = render_panorama(&field, &pose, a.width, &render_config(a.coarse, a.fine), seed)?;
    write_pfm(&pano, &a.out)
}

fn write_renders(dir: &Path, eval: &HeldoutEval) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (row, pano) in eval.rows.iter().zip(&eval.renders) {
        write_pfm(pano, dir.join(format!("{}.pfm", row.view)))?;
    }
    Ok(())
}

fn emit_csv(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let field = load_field(&a.ckpt)?;
    let test = read_manifest(&a.test)?;
    let transport = a.transport.as_deref().map(load_or_build_transport).transpose()?;
    let cfg = EvalConfig {
        metrics: MetricConfig {
            encoding: PuEncoding::from_str(&a.encoding)?,
            ..MetricConfig::default()
        },
        render: render_config(a.coarse, a.fine),
        width: a.width,
        seed,
    };
    let eval = eval_heldout(&field, &test, &cfg, transport.as_ref())?;
    if let Some(dir) = &a.renders {
        write_renders(dir, &eval)?;
    }
    emit_csv(&eval_csv(&a.dataset, &eval), a.out.as_deref())
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64) -> Result<()> {
    use crate::net::gradcheck::{check_mlp, check_primitives};
    use crate::net::MlpConfig;
    let mut results = check_primitives(seed)?;
    results.push(check_mlp(MlpConfig { depth: a.depth, width: a.width, ..MlpConfig::nerf(12, 6) }, 4, 64, seed)?);
    println!("check,probes,max_rel_error");
    let mut worst = 0.0f64;
    for r in &results {
        println!("{},{},{:.3e}", r.name, r.checked, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    if worst >= a.tolerance {
        return Err(Error::Numeric(format!("gradient check failed: max relative error {worst:.3e}")));
    }
    Ok(())
}

/// Re-encodes a render of a field trained on linearized LDR views as the
/// camera would have recorded it.
fn reencode(render: &Panorama, gamma: f64, exposure: f64) -> Panorama {
    render.map(|v| ((v as f64 * exposure).clamp(0.0, 1.0)).powf(1.0 / gamma) as f32)
}

fn pipeline_cmd(a: PipelineArgs, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(a.config.as_deref(), seed, None)?;
    let model = load_model(&a.model)?;
    let transport = a.transport.as_deref().map(load_or_build_transport).transpose()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut manifest = read_manifest(&a.manifest)?;
    let source = manifest.clone();
    let test = read_manifest(&a.test)?;
    let mut field: Option<RadianceField<f32>> = None;
    let mut renders: Vec<Panorama> = Vec::new();
    let eval_cfg = EvalConfig {
        width: a.width,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    for stage in pipeline_order(a.mode) {
        match stage {
            Stage::UpliftViews => {
                let path = uplift_manifest(&manifest, &model, None, &a.out.join("uplifted"))?;
                manifest = read_manifest(path)?;
            }
            Stage::TrainField => {
                let mut out = TrainOutput {
                    checkpoint: Some(a.out.join("field.ckpt")),
                    report: None,
                };
                field = Some(train_field::<f32>(&manifest, &cfg, &mut out)?.0);
            }
            Stage::Render => {
                let f = field.as_ref().ok_or_else(|| Error::invalid("render before training"))?;
                renders = eval_heldout(f, &test, &eval_cfg, None)?.renders;
            }
            Stage::UpliftRenders => {
                let g = source.gamma.unwrap_or(DEFAULT_GAMMA);
                renders = renders
                    .iter()
                    .map(|r| {
                        let up = uplift(&model, &reencode(r, g, source.exposure), &ResponseCurve::gamma(g))?;
                        Ok(up.map(|v| (v as f64 / source.exposure) as f32))
                    })
                    .collect::<Result<_>>()?;
            }
        }
    }
    let mut eval = HeldoutEval {
        rows: Vec::new(),
        renders: Vec::new(),
        targets: Vec::new(),
    };
    for (k, pred) in renders.into_iter().enumerate() {
        let (target, _) = test.load_radiance(k)?;
        let target = if target.width() != pred.width() { target.downsample(pred.width())? } else { target };
        eval.rows.push(score(&test.views[k].pose.frame_id, &pred, &target, &eval_cfg.metrics, transport.as_ref())?);
        eval.renders.push(pred);
        eval.targets.push(target);
    }
    write_renders(&a.out.join("renders"), &eval)?;
    let label = a.mode.to_string();
    emit_csv(&eval_csv(&label, &eval), Some(&a.out.join("eval.csv")))
}
