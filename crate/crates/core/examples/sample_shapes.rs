//! Decode latent codes drawn from the prior into meshes and turntable renders.
//!
//!     cargo run --release --example sample_shapes -- [checkpoint-dir]

mod common;

use meshvae::data::save_obj;
use meshvae::eval::{render_turntable, EvalSettings};
use meshvae::latent::sample_prior;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshvae::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let (trainer, _) = common::model_or_train(checkpoint.as_deref(), common::small_config(400));
    let config = &trainer.config;
    let settings = EvalSettings {
        poses: 4,
        fixed_lambda: config.fixed_lambda,
        ..EvalSettings::new(config.lighting.rig(), config.camera())
    };
    let out = common::output_dir("sample_shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..6 {
        let (z, _, _) = sample_prior(&mut rng, config.latent_dim);
        let mesh = trainer.model.decode(&z.0)?.build()?;
        save_obj(&mesh, &out.join(format!("sample_{i}.obj")))?;
        for (k, img) in render_turntable(&mesh, &settings)?.iter().enumerate() {
            img.save_png(&out.join(format!("sample_{i}_view{k}.png")))?;
        }
        let (lo, hi) = mesh.bounds().expect("non-empty mesh");
        println!("sample {i}: extent {:.2} x {:.2} x {:.2}", hi.x - lo.x, hi.y - lo.y, hi.z - lo.z);
    }
    println!("meshes and renders in {}", out.display());
    Ok(())
}
