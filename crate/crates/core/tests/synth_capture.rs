use panofield::geom::{Quat, Vec3};
use panofield::hdr::{linearize, ResponseCurve};
use panofield::imgio::{read_manifest, Panorama, Pose};
use panofield::synth::{
    make_bracket, make_dataset, simulate_capture, trace_panorama, BoxScene, DatasetConfig, Emitter, Wall,
};
use proptest::prelude::*;

fn furnace(albedo: f64) -> BoxScene {
    let emitters = Wall::ALL
        .into_iter()
        .map(|wall| Emitter {
            wall,
            uv_min: [0.0, 0.0],
            uv_max: [1.0, 1.0],
            radiance: [1.0; 3],
        })
        .collect();
    BoxScene::new(Vec3::new(1.3, 0.9, 1.1), [[albedo; 3]; 6], emitters).unwrap()
}

fn mean(p: &Panorama) -> f64 {
    p.data().iter().map(|&v| v as f64).sum::<f64>() / p.data().len() as f64
}

#[test]
fn furnace_room_adds_one_albedo_factor_per_bounce() {
    // Uniform unit emission everywhere: each bounce adds rho^k.
    let rho = 0.5;
    let s = furnace(rho);
    let pose = Pose::new("f", Vec3::new(0.2, -0.1, 0.3), Quat::IDENTITY);
    let one = trace_panorama(&s, &pose, 32, 8, 1, 4).unwrap();
    let two = trace_panorama(&s, &pose, 32, 8, 2, 4).unwrap();
    assert!((mean(&one) - (1.0 + rho)).abs() < 0.02 * (1.0 + rho), "{}", mean(&one));
    let want = 1.0 + rho + rho * rho;
    assert!((mean(&two) - want).abs() < 0.02 * want, "{}", mean(&two));
}

#[test]
fn second_bounce_only_adds_light() {
    let s = BoxScene::default();
    let pose = Pose::identity("c");
    let one = trace_panorama(&s, &pose, 32, 4, 1, 8).unwrap();
    let two = trace_panorama(&s, &pose, 32, 4, 2, 8).unwrap();
    assert!(one.data().iter().zip(two.data()).all(|(a, b)| b >= a));
}

#[test]
fn quadrupling_samples_halves_the_error() {
    let s = BoxScene::default();
    let pose = Pose::new("q", Vec3::new(0.3, 0.1, -0.2), Quat::IDENTITY);
    let reference = trace_panorama(&s, &pose, 32, 1024, 1, 99).unwrap();
    let rmse = |spp: usize| {
        let mut total = 0.0;
        for seed in 0..4 {
            let p = trace_panorama(&s, &pose, 32, spp, 1, seed).unwrap();
            total += p
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
        (total / (4 * reference.data().len()) as f64).sqrt()
    };
    let ratio = rmse(16) / rmse(4);
    assert!((0.35..0.65).contains(&ratio), "ratio {ratio}");
}

#[test]
fn direct_lighting_spans_more_than_twenty_stops() {
    let p = trace_panorama(&BoxScene::default(), &Pose::identity("c"), 64, 4, 1, 0).unwrap();
    let lum: Vec<f64> = p.data().iter().map(|&v| v as f64).filter(|&v| v > 0.0).collect();
    let hi = lum.iter().cloned().fold(0.0, f64::max);
    let lo = lum.iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo > 2f64.powi(20), "range 2^{:.1}", (hi / lo).log2());
}

#[test]
fn emitter_grows_as_the_camera_approaches_it() {
    // The default room's main emitter is on the ceiling.
    let s = BoxScene::default();
    let count = |y: f64| {
        let p = trace_panorama(&s, &Pose::new("e", Vec3::new(0.0, y, 0.0), Quat::IDENTITY), 64, 2, 1, 0).unwrap();
        p.data().chunks_exact(3).filter(|c| c[0] > 5e3).count()
    };
    let counts: Vec<usize> = [-0.8, -0.3, 0.2, 0.7].into_iter().map(count).collect();
    assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
}

fn tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_a_byte_identical_dataset() {
    let cfg = DatasetConfig {
        n_train: 3,
        n_test: 1,
        width: 16,
        spp: 2,
        seed: 5,
        ..DatasetConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_dataset(&BoxScene::default(), &cfg, a.path()).unwrap();
    rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| make_dataset(&BoxScene::default(), &cfg, b.path()).unwrap());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn no_training_views_leaves_only_test_poses() {
    let cfg = DatasetConfig {
        n_train: 0,
        n_test: 2,
        width: 16,
        spp: 1,
        ..DatasetConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(&BoxScene::default(), &cfg, dir.path()).unwrap();
    assert_eq!(read_manifest(&ds.manifest).unwrap().len(), 0);
    assert_eq!(read_manifest(&ds.test).unwrap().len(), 2);
}

#[test]
fn dataset_poses_fit_the_unit_sphere() {
    let cfg = DatasetConfig {
        n_train: 10,
        n_test: 3,
        width: 8,
        spp: 1,
        ..DatasetConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(&BoxScene::default(), &cfg, dir.path()).unwrap();
    for m in [&ds.manifest, &ds.test] {
        for v in &read_manifest(m).unwrap().views {
            assert!(v.pose.position.norm() < 1.0);
        }
    }
}

proptest! {
    #[test]
    fn captures_are_clipped_and_invert_where_unsaturated(
        vals in prop::collection::vec(0.0f32..50.0, 24),
        stops in -6.0f64..2.0,
        gamma in 1.0f64..3.0,
    ) {
        let hdr = Panorama::new(4, 2, vals.clone()).unwrap();
        let m = stops.exp2();
        let ldr = simulate_capture(&hdr, m, gamma).unwrap();
        prop_assert!(ldr.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let lin = linearize(&ldr, &ResponseCurve::gamma(gamma)).unwrap();
        for (k, &v) in vals.iter().enumerate() {
            let e = v as f64 * m;
            if e < 0.99 {
                prop_assert!((lin.data()[k] as f64 / m - v as f64).abs() <= 1e-4 * (1.0 + v as f64));
            } else if e >= 1.0 {
                prop_assert_eq!(ldr.data()[k], 1.0);
            }
        }
    }

    #[test]
    fn bracket_frames_brighten_with_the_multiplier(n in 2usize..12, stops in 1.0f64..24.0) {
        let hdr = Panorama::from_fn(8, |x, y| [(x * y) as f32 * 0.1, x as f32, 0.01]);
        let stack = make_bracket(&hdr, n, stops, 2.2, 0.5).unwrap();
        prop_assert_eq!(stack.frames.len(), n);
        for w in stack.frames.windows(2) {
            prop_assert!(w[1].0 > w[0].0);
            prop_assert!(w[0].1.data().iter().zip(w[1].1.data()).all(|(a, b)| b >= a));
        }
        let span = (stack.frames[n - 1].0 / stack.frames[0].0).log2();
        prop_assert!((span - stops).abs() < 1e-9);
    }
}
