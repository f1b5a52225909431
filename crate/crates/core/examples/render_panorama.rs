//! Render an HDR panorama from a field checkpoint at a new pose.
//!
//! `cargo run --release --example render_panorama -- field.ckpt out.pfm`
//!
//! Without arguments a randomly initialized field is rendered, which shows
//! the call sequence without needing a trained model.

use panofield::geom::{Quat, Vec3};
use panofield::imgio::{write_pfm, Pose};
use panofield::net::read_checkpoint;
use panofield::render::{render_panorama, RenderConfig};
use panofield::train::{FieldConfig, RadianceField};

fn main() -> panofield::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let field: RadianceField<f32> = match args.first() {
        Some(path) => RadianceField::from_checkpoint(&read_checkpoint(path)?)?,
        None => RadianceField::new(
            FieldConfig {
                width: 32,
                depth: 3,
                skip: None,
                ..FieldConfig::default()
            },
            0,
        )?,
    };
    let out = args.get(1).cloned().unwrap_or_else(|| "render.pfm".into());
    let pose = Pose::new(
        "novel",
        Vec3::new(0.1, 0.0, -0.2),
        Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.5),
    );
    let cfg = RenderConfig {
        n_coarse: 32,
        n_fine: 32,
        ..RenderConfig::default()
    };
    let t = std::time::Instant::now();
    let pano = render_panorama(&field, &pose, 64, &cfg, 0)?;
    println!("rendered in {:.2} s", t.elapsed().as_secs_f64());
    write_pfm(&pano, &out)?;
    println!("wrote {out} ({}x{}, peak {:.3})", pano.width(), pano.height(), pano.max_value());
    Ok(())
}
