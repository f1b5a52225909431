//! Path-trace a small box-room dataset and report its dynamic range.
//!
//! `cargo run --release --example synth_dataset [out_dir]`

use panofield::synth::{make_dataset, BoxScene, DatasetConfig, LUMA};

fn main() -> panofield::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_room".into());
    let cfg = DatasetConfig {
        n_train: 8,
        n_test: 2,
        width: 64,
        spp: 8,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&BoxScene::default(), &cfg, &out)?;
    println!("wrote {} training and {} held-out views to {out}", ds.train.len(), ds.test_views.len());
    println!("capture exposure 2^{}", ds.exposure.log2());
    for (pose, pano) in &ds.train {
        let lum: Vec<f64> = pano
            .data()
            .chunks_exact(3)
            .map(|c| (0..3).map(|k| LUMA[k] * c[k] as f64).sum())
            .filter(|&y: &f64| y > 0.0)
            .collect();
        let (lo, hi) = lum.iter().fold((f64::MAX, 0.0f64), |(a, b), &y| (a.min(y), b.max(y)));
        println!("{}: luminance {lo:.3e} .. {hi:.3e} ({:.1} stops)", pose.frame_id, (hi / lo).log2());
    }
    Ok(())
}
