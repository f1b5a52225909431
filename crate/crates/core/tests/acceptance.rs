//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use panofield::cli;
use panofield::field::{bg_param, sphere_exit_t, Ray};
use panofield::geom::{
    dir_to_pixel, pixel_cell_solid_angle, pixel_center, pixel_solid_angle, pixel_to_dir, sample_training_rays,
    SamplingMode, Vec3,
};
use panofield::hdr::{fuse_exposures, train_ldr2hdr, training_pair, Ldr2HdrTrainConfig, ResponseCurve};
use panofield::imgio::{read_manifest, Panorama, Pose};
use panofield::metrics::{log_outliers, log_psnr};
use panofield::net::gradcheck::{check_mlp, check_primitives};
use panofield::net::MlpConfig;
use panofield::prt::{build_transport, relight, render_rmse, ProbeScene, Surface, TransportMatrix};
use panofield::render::{composite, importance_resample, Intervals, RaySamples, RenderConfig, DEFAULT_PDF_FLOOR};
use panofield::rng::{stream, Purpose};
use panofield::synth::{make_bracket, make_dataset, write_fused_training, BoxScene, DatasetConfig};
use panofield::train::{eval_heldout, train_field, EvalConfig, HeldoutEval, LossSpace, TrainConfig, TrainOutput};
use rand::{Rng, SeedableRng};

type Outcome = Result<(bool, String), String>;

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn random_dir(r: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

fn angle(a: Vec3, b: Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

// 1
fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let prims = check_primitives(11).map_err(|e| e.to_string())?;
    let worst_prim = prims.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mlp = check_mlp(MlpConfig::nerf(63, 27), 4, 64, 11).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst_prim < 1e-5 && mlp.max_rel_error < 1e-5 && secs < 30.0,
        format!(
            "{} primitives max rel {worst_prim:.2e}; 8x256 MLP max rel {:.2e} over {} probes; {secs:.1} s",
            prims.len(),
            mlp.max_rel_error,
            mlp.checked
        ),
    ))
}

// 2
fn quadrature_oracle() -> Outcome {
    let (s, c0) = (2.3, [0.3, 0.6, 0.9]);
    let n = 4096;
    let b: Vec<f64> = (0..=n).map(|k| 1.7 * k as f64 / n as f64).collect();
    let iv = Intervals::fg(b).map_err(|e| e.to_string())?;
    let est = composite(&RaySamples {
        sigma: vec![s / 1.7; n],
        rgb: vec![c0; n],
        intervals: iv,
    })
    .map_err(|e| e.to_string())?;
    let homog = (0..3)
        .map(|c| {
            let want = c0[c] * (1.0 - (-s).exp());
            (est.rgb[c] - want).abs() / want
        })
        .fold(0.0, f64::max);

    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let m = r.gen_range(1..48);
        let mut b = vec![r.gen_range(0.0..0.1)];
        for _ in 0..m {
            let last = *b.last().unwrap();
            b.push(last + r.gen_range(1e-4..0.2));
        }
        let sigma: Vec<f64> = (0..m)
            .map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..60.0) })
            .collect();
        let est = composite(&RaySamples {
            intervals: Intervals::fg(b).map_err(|e| e.to_string())?,
            sigma,
            rgb: vec![[1.0; 3]; m],
        })
        .map_err(|e| e.to_string())?;
        let total: f64 = est.weights.iter().sum::<f64>() + est.t_end;
        worst = worst.max((total - 1.0).abs());
    }
    Ok((
        homog < 1e-4 && worst <= 1e-6,
        format!("homogeneous rel err {homog:.2e}; max |sum w + T - 1| {worst:.2e} over 1e5 rays"),
    ))
}

// 3
fn geometry_suite() -> Outcome {
    let mut r = rng(3);
    let mut trip = 0.0f64;
    let mut exit = 0.0f64;
    let mut bg = 0.0f64;
    for _ in 0..100_000 {
        let d = random_dir(&mut r);
        trip = trip.max(angle(pixel_to_dir(dir_to_pixel(d)), d));

        let o = random_dir(&mut r) * r.gen_range(0.0f64..0.999).cbrt();
        let ray = Ray::new(o, random_dir(&mut r));
        let t = sphere_exit_t(&ray).map_err(|e| e.to_string())?;
        exit = exit.max((ray.at(t).norm() - 1.0).abs());

        let p = random_dir(&mut r) * 10f64.powf(r.gen_range(0.0..6.0)) * 1.0001;
        let q = bg_param(p).map_err(|e| e.to_string())?.to_point();
        bg = bg.max((q - p).norm() / p.norm());
    }
    let (w, h) = (128, 64);
    let total: f64 = (0..h).map(|j| w as f64 * pixel_solid_angle(j, w, h)).sum();
    let cells: f64 = (0..h).map(|j| w as f64 * pixel_cell_solid_angle(j, w, h)).sum();
    let rel = (total / (4.0 * PI) - 1.0).abs();
    let rel_cells = (cells / (4.0 * PI) - 1.0).abs();
    Ok((
        trip < 1e-6 && exit <= 1e-9 && bg <= 1e-12 && rel <= 1e-3 && rel_cells <= 1e-3,
        format!(
            "round trip {trip:.1e} rad; sphere exit {exit:.1e}; bg_param rel {bg:.1e}; solid angle {rel:.1e} (cells {rel_cells:.1e})"
        ),
    ))
}

// 4
fn sampling_uniformity() -> Outcome {
    let pano = Panorama::constant(128, [1.0; 3]);
    let mut r = stream(4, Purpose::Misc, 0);
    let rays = sample_training_rays(&Pose::identity("s"), &pano, None, 1_000_000, &mut r, SamplingMode::Spherical)
        .map_err(|e| e.to_string())?;
    let n = rays.len() as f64;
    let mut first = [0.0f64; 3];
    let mut second = [0.0f64; 3];
    for (cone, _) in &rays {
        let d = cone.ray.direction.to_array();
        for k in 0..3 {
            first[k] += d[k] / n;
            second[k] += d[k] * d[k] / n;
        }
    }
    let m1 = first.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let m2 = second.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);

    let b: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
    let mut draws = importance_resample(&[1.0; 64], &b, 20_000, &mut r, DEFAULT_PDF_FLOOR).map_err(|e| e.to_string())?;
    draws.sort_by(f64::total_cmp);
    let m = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(k, &x)| (x - k as f64 / m).abs().max(((k + 1) as f64 / m - x).abs()))
        .fold(0.0, f64::max);
    Ok((
        m1 <= 0.01 && m2 <= 0.01 && ks < 0.02,
        format!("max |E[d]| {m1:.4}; max |E[d^2] - 1/3| {m2:.4}; KS {ks:.4}"),
    ))
}

// 5
fn fusion_oracle() -> Outcome {
    let oracle = Panorama::from_fn(128, |x, y| {
        let base = (-12.0 + 22.0 * x as f64 / 127.0).exp2() * (1.0 + 0.5 * (y as f64 * 0.3).sin());
        [base as f32, (0.5 * base) as f32, (2.0 * base) as f32]
    });
    let curve = ResponseCurve::gamma(2.2);
    let stack = make_bracket(&oracle, 11, 22.0, 2.2, 1.0).map_err(|e| e.to_string())?;
    let fused = fuse_exposures(&stack, &curve).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut counted = 0;
    for k in 0..oracle.data().len() {
        let unsaturated = stack.frames.iter().any(|(_, f)| f.data()[k] > 0.0 && f.data()[k] < 1.0);
        if unsaturated {
            let t = oracle.data()[k] as f64;
            worst = worst.max((fused.data()[k] as f64 - t).abs() / t);
            counted += 1;
        }
    }
    let mut doubled = stack.clone();
    doubled.frames.iter_mut().for_each(|f| f.0 *= 2.0);
    let half = fuse_exposures(&doubled, &curve).map_err(|e| e.to_string())?;
    let exact = fused.data().iter().zip(half.data()).all(|(a, b)| *a * 0.5 == *b);
    Ok((
        worst < 0.01 && counted > 0 && exact,
        format!("max rel err {worst:.2e} over {counted} unsaturated values; exposure equivariance exact: {exact}"),
    ))
}

// 6
fn prt_oracle() -> Outcome {
    let scene = ProbeScene::default();
    let (rw, rh, ew) = (48, 48, 32);
    let t = build_transport(&scene, rw, rh, ew).map_err(|e| e.to_string())?;
    let eh = ew / 2;

    let lit = relight(&t, &Panorama::constant(ew, [1.0; 3])).map_err(|e| e.to_string())?;
    let (mut unshadowed, mut const_err) = (0, 0.0f64);
    let core = scene.radius * (1.0 - scene.amplitude);
    let (mut shadowed, mut shadow_bad) = (0, 0);
    for p in 0..t.rows() {
        if t.surfaces[p] != Surface::Plane {
            continue;
        }
        let (_, x, n) = scene.primary(p % rw, p / rw, rw, rh);
        let o = x + n * 1e-4;
        // Cosine-weighted fraction of the hemisphere covered by the bounding
        // sphere: sin^2(angular radius) * cos(angle to the normal).
        let to_center = scene.center - x;
        let dist = to_center.norm();
        let bound = scene.radius * (1.0 + scene.amplitude);
        let occlusion = (bound / dist).powi(2) * to_center.dot(n) / dist;
        if occlusion <= 0.01 {
            unshadowed += 1;
            for c in 0..3 {
                let v = lit.get(p % rw, p / rw)[c] as f64;
                const_err = const_err.max((v - scene.albedo[c]).abs() / scene.albedo[c]);
            }
        }
        for j in 0..eh {
            for i in 0..ew {
                let d = pixel_to_dir(pixel_center(i, j, ew, eh));
                if d.dot(n) > 0.0 && hits_sphere(o, d, scene.center, core) {
                    shadowed += 1;
                    if t.row(p)[j * ew + i] != 0.0 {
                        shadow_bad += 1;
                    }
                }
            }
        }
    }

    let mut r = rng(6);
    let e1 = Panorama::from_fn(ew, |_, _| [r.gen_range(0.0..5.0), r.gen_range(0.0..5.0), r.gen_range(0.0..5.0)]);
    let e2 = Panorama::from_fn(ew, |_, _| [r.gen_range(0.0..50.0), r.gen_range(0.0..1.0), r.gen_range(0.0..9.0)]);
    let (a, b) = (0.7f32, 1.9f32);
    let mix = Panorama::from_fn(ew, |x, y| {
        let (p, q) = (e1.get(x, y), e2.get(x, y));
        [a * p[0] + b * q[0], a * p[1] + b * q[1], a * p[2] + b * q[2]]
    });
    let (l1, l2, lm) = (
        relight(&t, &e1).map_err(|e| e.to_string())?,
        relight(&t, &e2).map_err(|e| e.to_string())?,
        relight(&t, &mix).map_err(|e| e.to_string())?,
    );
    let scale = lm.data.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let lin = lm
        .data
        .iter()
        .zip(l1.data.iter().zip(&l2.data))
        .map(|(m, (p, q))| (*m as f64 - (a as f64 * *p as f64 + b as f64 * *q as f64)).abs() / scale)
        .fold(0.0, f64::max);
    Ok((
        unshadowed > 0 && const_err <= 0.02 && lin <= 1e-6 && shadowed > 0 && shadow_bad == 0,
        format!(
            "constant env on {unshadowed} unoccluded plane pixels: max rel dev {const_err:.2e}; linearity {lin:.1e}; {shadow_bad}/{shadowed} shadowed entries nonzero"
        ),
    ))
}

fn hits_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64) -> bool {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.dot(oc) - r * r);
    disc > 0.0 && -b - disc.sqrt() > 0.0
}

// 7 and 8 share the trained fields.
struct SynthRuns {
    fused: HeldoutEval,
    raw: HeldoutEval,
    planar: HeldoutEval,
    linear: HeldoutEval,
    minutes: Vec<(String, f64)>,
}

fn field_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.iterations = 5000;
    cfg.batch_rays = 64;
    cfg.n_coarse = 16;
    cfg.n_fine = 16;
    cfg.adam.lr = 1e-3;
    cfg.field.width = 64;
    cfg.field.depth = 4;
    cfg.field.skip = Some(2);
    cfg.checkpoint_every = 0;
    cfg.seed = 7;
    cfg
}

fn synth_runs(dir: &Path, transport: &TransportMatrix) -> Result<SynthRuns, String> {
    let e = |e: panofield::Error| e.to_string();
    let dcfg = DatasetConfig {
        n_train: 20,
        n_test: 4,
        width: 128,
        spp: 16,
        seed: 7,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&BoxScene::default(), &dcfg, dir).map_err(e)?;
    let fused_path = write_fused_training(&ds, 11, 22.0, dcfg.gamma).map_err(e)?;
    let fused = read_manifest(&fused_path).map_err(e)?;
    let raw = read_manifest(&ds.manifest).map_err(e)?;
    let test = read_manifest(&ds.test).map_err(e)?;
    let ecfg = EvalConfig {
        render: RenderConfig {
            n_coarse: 32,
            n_fine: 32,
            ..RenderConfig::default()
        },
        width: Some(64),
        seed: 3,
        ..EvalConfig::default()
    };
    let mut minutes = Vec::new();
    let mut run = |name: &str, manifest: &_, cfg: &TrainConfig| -> Result<HeldoutEval, String> {
        let t = Instant::now();
        let (field, _) = train_field::<f32>(manifest, cfg, &mut TrainOutput::default()).map_err(e)?;
        minutes.push((name.to_string(), t.elapsed().as_secs_f64() / 60.0));
        eval_heldout(&field, &test, &ecfg, Some(transport)).map_err(e)
    };
    let base = field_config();
    let fused_eval = run("fused", &fused, &base)?;
    let raw_eval = run("raw-ldr", &raw, &base)?;
    let planar_eval = run(
        "planar",
        &fused,
        &TrainConfig {
            sampling: SamplingMode::Planar,
            ..base.clone()
        },
    )?;
    let linear_eval = run(
        "linear",
        &fused,
        &TrainConfig {
            loss_space: LossSpace::Linear,
            ..base.clone()
        },
    )?;
    Ok(SynthRuns {
        fused: fused_eval,
        raw: raw_eval,
        planar: planar_eval,
        linear: linear_eval,
        minutes,
    })
}

/// The constant panorama minimizing the solid-angle weighted squared error
/// of `log(1 + x)`: per channel, the weighted mean of the log values.
fn best_constant(t: &Panorama) -> Panorama {
    let (w, h) = (t.width(), t.height());
    let (mut acc, mut wsum) = ([0.0f64; 3], 0.0);
    for y in 0..h {
        let sa = pixel_cell_solid_angle(y, w, h);
        for x in 0..w {
            let p = t.get(x, y);
            for c in 0..3 {
                acc[c] += sa * (p[c] as f64).ln_1p();
            }
            wsum += sa;
        }
    }
    Panorama::constant(w, acc.map(|a| ((a / wsum).exp() - 1.0) as f32))
}

fn end_to_end(runs: &SynthRuns) -> Outcome {
    let n = runs.fused.rows.len();
    let mut gains = Vec::new();
    for k in 0..n {
        let t = &runs.fused.targets[k];
        let base = log_psnr(&best_constant(t), t).map_err(|e| e.to_string())?;
        gains.push(runs.fused.rows[k].log_psnr - base);
    }
    let gain = gains.iter().sum::<f64>() / n as f64;
    let rmse = |e: &HeldoutEval| e.mean(|r| r.rmse.unwrap_or(f64::NAN));
    let (fused, raw) = (rmse(&runs.fused), rmse(&runs.raw));
    let fused_minutes = runs.minutes[0].1;
    Ok((
        gain >= 6.0 && fused < raw && fused_minutes < 30.0,
        format!(
            "log-PSNR gain over best constant {gain:.2} dB (per view {}); render RMSE fused {fused:.4} vs raw LDR {raw:.4}; training {fused_minutes:.1} min",
            gains.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>().join("/")
        ),
    ))
}

fn ablations(runs: &SynthRuns) -> Outcome {
    let (sph, pla) = (runs.fused.mean(|r| r.log_psnr), runs.planar.mean(|r| r.log_psnr));
    let (sph_pu, pla_pu) = (runs.fused.mean(|r| r.pu_psnr), runs.planar.mean(|r| r.pu_psnr));
    let count = |e: &HeldoutEval| -> Result<usize, String> {
        (0..e.rows.len())
            .map(|k| log_outliers(&e.renders[k], &e.targets[k], 10.0).map_err(|e| e.to_string()))
            .sum()
    };
    let (log_out, lin_out) = (count(&runs.fused)?, count(&runs.linear)?);
    Ok((
        sph >= pla - 0.1 && log_out < lin_out,
        format!(
            "held-out log-PSNR spherical {sph:.3} vs planar {pla:.3} (PU-PSNR {sph_pu:.3} vs {pla_pu:.3}); log-error outliers log loss {log_out} vs linear loss {lin_out}"
        ),
    ))
}

// 9
fn render_loss_direction(dir: &Path) -> Outcome {
    let e = |e: panofield::Error| e.to_string();
    let dcfg = DatasetConfig {
        n_train: 24,
        n_test: 6,
        width: 64,
        spp: 4,
        seed: 9,
        mask_radius: None,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&BoxScene::default(), &dcfg, dir).map_err(e)?;
    let tm = build_transport(&ProbeScene::default(), 32, 32, 32).map_err(e)?;
    let hdr: Vec<Panorama> = ds.train.iter().map(|v| v.1.clone()).collect();
    let mut pairs = Vec::new();
    for seed in 0..3u64 {
        let mut scores = [0.0; 2];
        for (slot, transport) in [None, Some(&tm)].into_iter().enumerate() {
            let cfg = Ldr2HdrTrainConfig {
                iterations: 500,
                seed,
                ..Ldr2HdrTrainConfig::default()
            };
            let (model, _) = train_ldr2hdr(&hdr, transport, &cfg).map_err(e)?;
            let held = Ldr2HdrTrainConfig { augment: false, ..cfg };
            for (k, (_, pano)) in ds.test_views.iter().enumerate() {
                let (input, target) = training_pair(pano, &held, k as u64).map_err(e)?;
                scores[slot] += render_rmse(&model.apply(&input).map_err(e)?, &target, &tm).map_err(e)?;
            }
            scores[slot] /= ds.test_views.len() as f64;
        }
        pairs.push((scores[1], scores[0]));
    }
    Ok((
        pairs.len() >= 3 && pairs.iter().all(|(with, without)| with < without),
        format!(
            "render RMSE with/without render loss per seed: {}",
            pairs
                .iter()
                .map(|(a, b)| format!("{a:.4}/{b:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ))
}

// 10
fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let config = dir.join("train.cfg");
    std::fs::write(
        &config,
        "iterations = 25\nbatch_rays = 96\nn_coarse = 8\nn_fine = 8\nwidth = 32\ndepth = 3\nskip = 1\nlr = 1e-3\nchunk_rays = 16\n",
    )
    .map_err(|e| e.to_string())?;
    let run_all = |threads: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out = dir.join(format!("t{threads}"));
        let o = |name: &str| out.join(name).to_string_lossy().into_owned();
        let data = o("data");
        let steps: Vec<Vec<String>> = vec![
            vec!["synth", "--train", "6", "--test", "2", "--width", "32", "--spp", "2", "--fused", "5", "--out", &data]
                .into_iter()
                .map(String::from)
                .collect(),
            vec![
                "train-field".into(),
                "--manifest".into(),
                format!("{data}/fused"),
                "--config".into(),
                config.to_string_lossy().into_owned(),
                "--report".into(),
                o("loss.csv"),
                "--out".into(),
                o("field.ckpt"),
            ],
            vec![
                "eval".into(),
                "--ckpt".into(),
                o("field.ckpt"),
                "--test".into(),
                format!("{data}/test"),
                "--transport".into(),
                o("probe.prt"),
                "--width".into(),
                "32".into(),
                "--coarse".into(),
                "8".into(),
                "--fine".into(),
                "8".into(),
                "--renders".into(),
                o("renders"),
                "--out".into(),
                o("eval.csv"),
            ],
            vec![
                "train-ldr2hdr".into(),
                "--manifest".into(),
                format!("{data}/test"),
                "--transport".into(),
                o("probe.prt"),
                "--iterations".into(),
                "4".into(),
                "--batch".into(),
                "3".into(),
                "--width".into(),
                "32".into(),
                "--out".into(),
                o("ldr2hdr.ckpt"),
            ],
        ];
        for step in steps {
            let mut argv = vec!["panofield".to_string(), "--seed".into(), "5".into(), "--threads".into(), threads.into()];
            argv.extend(step);
            let code = cli::run(argv.clone());
            if code != 0 {
                return Err(format!("{} exited with {code}", argv[5]));
            }
        }
        Ok(files_under(&out))
    };
    let one = run_all("1")?;
    let three = run_all("3")?;
    let same = one.len() == three.len() && one.iter().zip(&three).all(|(a, b)| a == b);
    let differing: Vec<&str> = one
        .iter()
        .zip(&three)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    Ok((
        same,
        format!(
            "{} output files of synth/train-field/eval/train-ldr2hdr compared between --threads 1 and 3; differing: {}",
            one.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut report = |id: &str, title: &str, outcome: Outcome| {
        let (pass, detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("[{}] {id} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report("1", "gradient oracle", gradient_oracle());
    report("2", "quadrature oracle", quadrature_oracle());
    report("3", "geometry suite", geometry_suite());
    report("4", "sampling uniformity", sampling_uniformity());
    report("5", "HDR fusion oracle", fusion_oracle());
    report("6", "PRT oracle", prt_oracle());

    let transport = build_transport(&ProbeScene::default(), 64, 64, 32).expect("transport");
    match synth_runs(&tmp.path().join("room"), &transport) {
        Ok(runs) => {
            report("7", "end-to-end overfit", end_to_end(&runs));
            report("8", "ablation directions", ablations(&runs));
        }
        Err(e) => {
            report("7", "end-to-end overfit", Err(e.clone()));
            report("8", "ablation directions", Err(e));
        }
    }
    report("9", "render loss direction", render_loss_direction(&tmp.path().join("uplift")));
    report("10", "determinism", determinism(&tmp.path().join("threads")));
    println!("acceptance: {} of 10 criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
