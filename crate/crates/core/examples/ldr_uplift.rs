//! Inverse-tonemap a clipped capture with the parametric model and with a
//! briefly trained learned model, scoring both through the probe scene.

use panofield::geom::{Quat, Vec3};
use panofield::hdr::{
    train_ldr2hdr, training_pair, uplift, Ldr2HdrModel, Ldr2HdrTrainConfig, ParametricModel, ResponseCurve,
};
use panofield::imgio::Pose;
use panofield::net::AdamConfig;
use panofield::prt::{build_transport, render_rmse, ProbeScene};
use panofield::synth::{trace_panorama, BoxScene};

fn main() -> panofield::Result<()> {
    let scene = BoxScene::default();
    let panos = (0..8)
        .map(|k| {
            let a = k as f64;
            let at = Vec3::new(0.8 * a.sin(), 0.2 * a.cos(), 0.6 * (2.0 * a).cos());
            trace_panorama(&scene, &Pose::new(format!("p{k}"), at, Quat::IDENTITY), 32, 4, 2, k)
        })
        .collect::<panofield::Result<Vec<_>>>()?;
    let transport = build_transport(&ProbeScene::default(), 32, 32, 32)?;

    let cfg = Ldr2HdrTrainConfig {
        iterations: 300,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..Ldr2HdrTrainConfig::default()
    };
    let (model, losses) = train_ldr2hdr(&panos[1..], Some(&transport), &cfg)?;
    let mean = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    println!(
        "learned model loss {:.3} (first 20) -> {:.3} (last 20)",
        mean(&losses[..20]),
        mean(&losses[losses.len() - 20..])
    );

    // Held-out view, exposure-normalized and clipped the same way as in training.
    let held = Ldr2HdrTrainConfig { augment: false, ..cfg };
    let (ldr, truth) = training_pair(&panos[0], &held, 0)?;
    let linear = ResponseCurve::linear();
    let parametric = uplift(&Ldr2HdrModel::Parametric(ParametricModel::default()), &ldr, &linear)?;
    let learned = uplift(&Ldr2HdrModel::Learned(model), &ldr, &linear)?;
    for (name, p) in [("clipped", &ldr), ("parametric", &parametric), ("learned", &learned)] {
        println!("{name:10} render RMSE {:.4}", render_rmse(p, &truth, &transport)?);
    }
    Ok(())
}
