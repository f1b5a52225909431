use panofield::imgio::Panorama;
use panofield::metrics::{log_outliers, log_psnr, psnr, pu_psnr, ssim, MetricConfig, PuEncoding, DEFAULT_CEILING};
use panofield::rng::{stream, Purpose};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn scene(width: usize) -> Panorama {
    Panorama::from_fn(width, |x, y| {
        let v = 0.05 + 3.0 * ((x as f32 * 0.3).sin() * (y as f32 * 0.5).cos()).abs();
        [v, 0.7 * v + 0.1, if x % 11 == 0 { 40.0 } else { 0.2 }]
    })
}

/// Multiplicative noise keeps every value positive.
fn noisy(p: &Panorama, sigma: f64, seed: u64) -> Panorama {
    let mut rng = stream(seed, Purpose::Misc, 0);
    let n = Normal::new(0.0, 1.0).unwrap();
    let z: Vec<f32> = (0..p.data().len()).map(|_| n.sample(&mut rng)).collect();
    let data = p
        .data()
        .iter()
        .zip(&z)
        .map(|(&v, &e)| v * (sigma as f32 * e).exp())
        .collect();
    Panorama::new(p.width(), p.height(), data).unwrap()
}

#[test]
fn textbook_psnr_values() {
    let a = Panorama::from_fn(16, |x, _| [(x as f32 / 16.0) * 0.8; 3]);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
    let c = a.map(|v| v + 0.01);
    assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-3);
}

#[test]
fn pu_psnr_of_an_image_with_itself_is_the_ceiling() {
    let a = scene(32);
    for enc in [
        PuEncoding::Pu21Banding,
        PuEncoding::Pu21BandingGlare,
        PuEncoding::Pu21Peaks,
        PuEncoding::Pu21PeaksGlare,
        PuEncoding::Log2,
    ] {
        let cfg = MetricConfig {
            encoding: enc,
            ..MetricConfig::default()
        };
        assert_eq!(pu_psnr(&a, &a, &cfg).unwrap(), DEFAULT_CEILING);
    }
}

#[test]
fn stronger_noise_never_scores_higher() {
    let a = scene(32);
    let cfg = MetricConfig::default();
    for trial in 0..10 {
        let scores: Vec<f64> = [0.01, 0.05, 0.2, 0.8]
            .into_iter()
            .map(|s| pu_psnr(&noisy(&a, s, trial), &a, &cfg).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[1] <= w[0]), "{scores:?}");
    }
}

#[test]
fn doubling_exposure_barely_moves_log2_pu_psnr() {
    let a = scene(32);
    let b = noisy(&a, 0.1, 3);
    let cfg = MetricConfig {
        encoding: PuEncoding::Log2,
        ..MetricConfig::default()
    };
    let base = pu_psnr(&a, &b, &cfg).unwrap();
    let scaled = pu_psnr(&a.map(|v| 2.0 * v), &b.map(|v| 2.0 * v), &cfg).unwrap();
    assert!((base - scaled).abs() < 1.5, "{base} vs {scaled}");
}

#[test]
fn log_metrics_prefer_the_closer_prediction() {
    let a = scene(32);
    let near = noisy(&a, 0.02, 5);
    let far = noisy(&a, 0.3, 5);
    assert!(log_psnr(&near, &a).unwrap() > log_psnr(&far, &a).unwrap());
    let mut spiky = near.clone();
    for k in 0..12 {
        let x = (k * 7) % 32;
        spiky.set(x, k % 16, [500.0; 3]);
    }
    assert!(log_outliers(&spiky, &a, 10.0).unwrap() >= 12);
}

#[test]
fn mismatched_sizes_are_rejected() {
    assert!(ssim(&scene(16), &scene(32)).is_err());
    assert!(pu_psnr(&scene(16), &scene(32), &MetricConfig::default()).is_err());
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, sigma in 0.0f64..1.0) {
        let a = scene(16);
        let b = noisy(&a, sigma, seed);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encodings_are_monotone(y0 in 0.005f64..9000.0, f in 1.001f64..3.0) {
        for enc in [PuEncoding::Pu21Banding, PuEncoding::Pu21BandingGlare, PuEncoding::Pu21Peaks, PuEncoding::Log2] {
            prop_assert!(enc.encode(y0 * f) >= enc.encode(y0));
        }
    }
}
