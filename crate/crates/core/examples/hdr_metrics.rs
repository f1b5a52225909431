//! Compare a traced panorama with degraded versions under every metric.

use panofield::imgio::Pose;
use panofield::metrics::{display_exposure, log_psnr, psnr, pu_psnr, ssim, tonemap, MetricConfig, PuEncoding};
use panofield::synth::{simulate_capture, trace_panorama, BoxScene};

fn main() -> panofield::Result<()> {
    let truth = trace_panorama(&BoxScene::default(), &Pose::identity("c"), 64, 16, 2, 0)?;
    let noisy = trace_panorama(&BoxScene::default(), &Pose::identity("c"), 64, 2, 2, 1)?;
    let exposure = (-8.0f64).exp2();
    let clipped = simulate_capture(&truth, exposure, 1.0)?.map(|v| v / exposure as f32);
    let dimmed = truth.map(|v| 0.5 * v);
    let k = display_exposure(&truth) as f32;
    for (name, p) in [("2 spp", &noisy), ("clipped", &clipped), ("half", &dimmed)] {
        let mut line = format!("{name:8}");
        for enc in [PuEncoding::Pu21BandingGlare, PuEncoding::Log2] {
            let cfg = MetricConfig {
                encoding: enc,
                ..MetricConfig::default()
            };
            line += &format!("  {enc} {:6.2}", pu_psnr(p, &truth, &cfg)?);
        }
        let (a, b) = (tonemap(&p.map(|v| v * k)), tonemap(&truth.map(|v| v * k)));
        line += &format!(
            "  PSNR {:6.2}  SSIM {:.4}  log-PSNR {:6.2}",
            psnr(&a, &b, 1.0)?,
            ssim(&a, &b)?,
            log_psnr(p, &truth)?
        );
        println!("{line}");
    }
    Ok(())
}
