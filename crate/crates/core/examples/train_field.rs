//! Fit a small radiance field to a traced room and score it on held-out
//! poses.
//!
//! `cargo run --release --example train_field [iterations]`

use panofield::imgio::read_manifest;
use panofield::render::RenderConfig;
use panofield::synth::{make_dataset, write_fused_training, BoxScene, DatasetConfig};
use panofield::train::{eval_heldout, train_field, EvalConfig, TrainConfig, TrainOutput};

fn main() -> panofield::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let dir = std::env::temp_dir().join("panofield_train_field");
    let dcfg = DatasetConfig {
        n_train: 12,
        n_test: 2,
        width: 64,
        spp: 8,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&BoxScene::default(), &dcfg, &dir)?;
    let fused = read_manifest(write_fused_training(&ds, 9, 20.0, dcfg.gamma)?)?;

    let mut cfg = TrainConfig::default();
    cfg.iterations = iterations;
    cfg.batch_rays = 64;
    cfg.n_coarse = 16;
    cfg.n_fine = 16;
    cfg.adam.lr = 1e-3;
    cfg.field.width = 64;
    cfg.field.depth = 4;
    cfg.field.skip = Some(2);
    cfg.checkpoint_every = 0;
    let (field, reports) = train_field::<f32>(&fused, &cfg, &mut TrainOutput::default())?;
    for r in reports.iter().step_by((reports.len() / 10).max(1)) {
        println!("iteration {:5}  loss {:.5}", r.iteration, r.loss);
    }

    let ecfg = EvalConfig {
        render: RenderConfig {
            n_coarse: 32,
            n_fine: 32,
            ..RenderConfig::default()
        },
        width: Some(32),
        ..EvalConfig::default()
    };
    let eval = eval_heldout(&field, &read_manifest(&ds.test)?, &ecfg, None)?;
    for row in &eval.rows {
        println!("{}: log-PSNR {:.2} dB, PU-PSNR {:.2} dB", row.view, row.log_psnr, row.pu_psnr);
    }
    Ok(())
}
