use panofield::field::{ConeRay, Ray};
use panofield::geom::{Quat, Vec3};
use panofield::imgio::Pose;
use panofield::render::{
    composite, importance_resample, render_panorama, render_ray, FieldQuery, FieldSample, Intervals, RaySamples,
    RenderConfig,
};
use panofield::rng::{stream, Purpose};
use proptest::prelude::*;
use rand::Rng;

/// Vacuum inside the unit sphere, an opaque emissive shell outside it.
struct Shell {
    inner: f64,
    outer: f64,
    rgb: [f64; 3],
}

impl FieldQuery for Shell {
    fn query(&self, samples: &[FieldSample]) -> panofield::Result<Vec<(f64, [f64; 3])>> {
        Ok(samples
            .iter()
            .map(|s| match s {
                FieldSample::Fg { .. } => (0.0, [0.0; 3]),
                FieldSample::Bg { point, .. } => {
                    let r = 1.0 / point.inv_radius;
                    if (self.inner..self.outer).contains(&r) {
                        (1e3, self.rgb)
                    } else {
                        (0.0, [0.0; 3])
                    }
                }
            })
            .collect())
    }
}

/// A thin dense wall inside the unit sphere whose color varies in space.
struct Wall;

impl FieldQuery for Wall {
    fn query(&self, samples: &[FieldSample]) -> panofield::Result<Vec<(f64, [f64; 3])>> {
        Ok(samples
            .iter()
            .map(|s| {
                let p = s.position();
                match s {
                    FieldSample::Fg { .. } => {
                        let r = p.norm();
                        let sigma = if (0.6..0.63).contains(&r) { 400.0 } else { 0.0 };
                        (sigma, [0.5 + 0.5 * p.x, 0.5 + 0.5 * p.y, 2.0 * r])
                    }
                    FieldSample::Bg { .. } => (0.0, [0.0; 3]),
                }
            })
            .collect())
    }
}

#[test]
fn vacuum_with_emissive_background_shell_returns_the_shell_radiance() {
    let field = Shell {
        inner: 2.5,
        outer: 6.0,
        rgb: [3.0, 0.25, 7.5],
    };
    let cfg = RenderConfig::default();
    let mut rng = stream(1, Purpose::Misc, 0);
    for k in 0..50 {
        let d = Quat::from_axis_angle(Vec3::new(0.3, 1.0, -0.2).normalized(), k as f64 * 0.41)
            .rotate(Vec3::new(0.0, 0.0, 1.0));
        let o = Vec3::new(0.1, -0.2, 0.05);
        let out = render_ray(&field, &ConeRay::new(Ray::new(o, d), 0.01), &cfg, &mut rng).unwrap();
        for c in 0..3 {
            assert!((out.fine.rgb[c] - field.rgb[c]).abs() < 1e-6 * field.rgb[c], "{:?}", out.fine.rgb);
        }
    }
}

#[test]
fn fine_pass_varies_less_than_coarse_pass() {
    let cfg = RenderConfig {
        n_coarse: 16,
        n_fine: 32,
        perturb: true,
        ..RenderConfig::default()
    };
    let mut dir_rng = stream(2, Purpose::Misc, 0);
    let (mut coarse_var, mut fine_var) = (0.0, 0.0);
    let rays = 1000;
    let repeats = 8;
    for i in 0..rays {
        let d = Vec3::new(
            dir_rng.gen_range(-1.0..1.0),
            dir_rng.gen_range(-1.0..1.0),
            dir_rng.gen_range(-1.0..1.0),
        )
        .normalized();
        let cone = ConeRay::new(Ray::new(Vec3::new(0.0, 0.0, 0.0), d), 0.005);
        let mut coarse = Vec::new();
        let mut fine = Vec::new();
        for r in 0..repeats {
            let mut rng = stream(3, Purpose::Render, (i * repeats + r) as u64);
            let out = render_ray(&Wall, &cone, &cfg, &mut rng).unwrap();
            coarse.push(out.coarse.rgb);
            fine.push(out.fine.rgb);
        }
        let var = |v: &[[f64; 3]]| {
            (0..3)
                .map(|c| {
                    let m = v.iter().map(|x| x[c]).sum::<f64>() / v.len() as f64;
                    v.iter().map(|x| (x[c] - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
                })
                .sum::<f64>()
        };
        coarse_var += var(&coarse) / rays as f64;
        fine_var += var(&fine) / rays as f64;
    }
    assert!(fine_var <= coarse_var, "fine {fine_var} vs coarse {coarse_var}");
}

#[test]
fn panorama_is_independent_of_the_worker_count() {
    let pose = Pose::new("p", Vec3::new(0.1, 0.0, -0.1), Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.3));
    let cfg = RenderConfig {
        n_coarse: 12,
        n_fine: 12,
        perturb: true,
        ..RenderConfig::default()
    };
    let render = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| render_panorama(&Wall, &pose, 32, &cfg, 9).unwrap())
    };
    let one = render(1);
    assert_eq!(one.width(), 32);
    assert_eq!(one.height(), 16);
    assert_eq!(one.data(), render(8).data());
}

#[test]
fn vacuum_field_with_constant_background_renders_a_constant_panorama() {
    let field = Shell {
        inner: 1.0,
        outer: f64::INFINITY,
        rgb: [0.7, 0.8, 0.9],
    };
    let cfg = RenderConfig {
        n_coarse: 16,
        n_fine: 16,
        ..RenderConfig::default()
    };
    let pano = render_panorama(&field, &Pose::identity("c"), 16, &cfg, 0).unwrap();
    for px in pano.data().chunks_exact(3) {
        for c in 0..3 {
            assert!((px[c] - field.rgb[c] as f32).abs() < 1e-5);
        }
    }
}

fn ks_uniform(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(k, &v)| (v - k as f64 / n).abs().max(((k + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn resampling_uniform_weights_is_uniform() {
    let b: Vec<f64> = (0..=32).map(|k| k as f64 / 32.0).collect();
    let mut rng = stream(5, Purpose::Misc, 0);
    let draws = importance_resample(&[0.3; 32], &b, 100_000, &mut rng, 1e-5).unwrap();
    assert!(ks_uniform(draws) < 0.02);
}

#[test]
fn resampling_follows_the_piecewise_constant_density() {
    // Weights 1 on [0, 0.5) and 3 on [0.5, 1): the CDF maps through
    // F(x) = x/2 below 0.5 and 1/4 + 3(x - 1/2)/2 above.
    let b = [0.0, 0.5, 1.0];
    let mut rng = stream(6, Purpose::Misc, 0);
    let draws = importance_resample(&[1.0, 3.0], &b, 50_000, &mut rng, 0.0).unwrap();
    let cdf = |x: f64| if x < 0.5 { x / 2.0 } else { 0.25 + 1.5 * (x - 0.5) };
    assert!(ks_uniform(draws.into_iter().map(cdf).collect()) < 0.02);
}

proptest! {
    #[test]
    fn weights_and_residual_transmittance_sum_to_one(
        deltas in prop::collection::vec(1e-4f64..0.5, 1..40),
        sigmas in prop::collection::vec(0.0f64..80.0, 40),
    ) {
        let mut b = vec![0.05];
        for d in &deltas {
            b.push(b.last().unwrap() + d);
        }
        let n = deltas.len();
        let est = composite(&RaySamples {
            intervals: Intervals::fg(b).unwrap(),
            sigma: sigmas[..n].to_vec(),
            rgb: vec![[1.0, 0.5, 0.25]; n],
        })
        .unwrap();
        let total = est.weights.iter().sum::<f64>() + est.t_end;
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(est.weights.iter().all(|&w| w >= 0.0));
        // unit radiance: the estimate is exactly the accumulated opacity
        prop_assert!((est.rgb[0] - (1.0 - est.t_end)).abs() < 1e-9);
    }

    #[test]
    fn composite_is_monotone_in_radiance(
        sigmas in prop::collection::vec(0.0f64..20.0, 8),
        rgb in prop::collection::vec(0.0f64..5.0, 8),
        k in 0usize..8,
        bump in 0.0f64..3.0,
    ) {
        let b: Vec<f64> = (0..=8).map(|i| 0.1 + 0.1 * i as f64).collect();
        let mk = |extra: f64| {
            let mut c: Vec<[f64; 3]> = rgb.iter().map(|&v| [v; 3]).collect();
            c[k][1] += extra;
            composite(&RaySamples { intervals: Intervals::fg(b.clone()).unwrap(), sigma: sigmas.clone(), rgb: c }).unwrap()
        };
        prop_assert!(mk(bump).rgb[1] >= mk(0.0).rgb[1]);
    }
}
