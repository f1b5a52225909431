//! Capture a traced panorama as an exposure bracket and merge it back.

use panofield::hdr::{fuse_exposures, ResponseCurve};
use panofield::imgio::Pose;
use panofield::synth::{make_bracket, trace_panorama, BoxScene};

fn main() -> panofield::Result<()> {
    let scene = BoxScene::default();
    let hdr = trace_panorama(&scene, &Pose::identity("c"), 64, 8, 2, 1)?;
    let gamma = 2.2;
    for (frames, stops) in [(3, 4.0), (7, 12.0), (11, 22.0)] {
        let stack = make_bracket(&hdr, frames, stops, gamma, (-9.0f64).exp2())?;
        let fused = fuse_exposures(&stack, &ResponseCurve::gamma(gamma))?;
        let worst = hdr
            .data()
            .iter()
            .zip(fused.data())
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, f)| ((f - t) / t).abs())
            .fold(0.0f32, f32::max);
        println!("{frames:2} frames over {stops:4} stops: worst relative error {worst:.3e}");
    }
    Ok(())
}
