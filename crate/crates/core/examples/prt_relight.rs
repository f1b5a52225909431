//! Relight the probe scene with a traced environment and write the image.
//!
//! `cargo run --release --example prt_relight [out.pfm]`

use panofield::imgio::Pose;
use panofield::prt::{build_transport, relight, ProbeScene, DEFAULT_ENV_WIDTH, DEFAULT_RENDER_SIZE};
use panofield::synth::{trace_panorama, BoxScene};

fn main() -> panofield::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "relit.pfm".into());
    let probe = ProbeScene::default();
    let t = build_transport(&probe, DEFAULT_RENDER_SIZE, DEFAULT_RENDER_SIZE, DEFAULT_ENV_WIDTH)?;
    println!("transport {} x {}", t.rows(), t.cols());
    let env = trace_panorama(&BoxScene::default(), &Pose::identity("probe"), DEFAULT_ENV_WIDTH, 16, 2, 0)?;
    let image = relight(&t, &env)?;
    let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / image.data.len() as f64;
    println!("mean relit radiance {mean:.3}");
    image.write_pfm(&out)?;
    println!("wrote {out}");
    Ok(())
}
