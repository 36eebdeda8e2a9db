//! Encode two images and decode evenly spaced points on the line between
//! their latent codes.
//!
//!     cargo run --release --example interpolate_latent -- [checkpoint-dir]

mod common;

use meshvae::data::save_obj;
use meshvae::nets::Mode;
use meshvae::render::render;

fn main() -> meshvae::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let (trainer, test) = common::model_or_train(checkpoint.as_deref(), common::small_config(400));
    let config = &trainer.config;
    let (rig, camera) = (config.lighting.rig(), config.camera());
    let a = render(&test[0], 0.6, config.fixed_lambda, &rig, &camera, [0.0; 3])?;
    let b = render(&test[1], 0.6, config.fixed_lambda, &rig, &camera, [0.0; 3])?;
    let posts = trainer.model.encode(&[&a, &b], Mode::Eval)?;

    let out = common::output_dir("interpolate_latent");
    let steps = 7;
    for k in 0..steps {
        let s = k as f64 / (steps - 1) as f64;
        let z: Vec<f64> = posts[0]
            .z_mean
            .iter()
            .zip(&posts[1].z_mean)
            .map(|(x, y)| (1.0 - s) * x + s * y)
            .collect();
        let mesh = trainer.model.decode(&z)?.build()?;
        save_obj(&mesh, &out.join(format!("step_{k}.obj")))?;
        render(&mesh, 0.6, config.fixed_lambda, &rig, &camera, [0.0; 3])?.save_png(&out.join(format!("step_{k}.png")))?;
        let (lo, hi) = mesh.bounds().expect("non-empty mesh");
        println!("t = {s:.2}: height {:.2}", hi.y - lo.y);
    }
    println!("meshes and renders in {}", out.display());
    Ok(())
}
