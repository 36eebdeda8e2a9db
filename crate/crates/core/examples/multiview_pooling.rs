//! Several views of one object share a single shape code: the per-view
//! posteriors are pooled before decoding, while each view keeps its own pose.
//!
//!     cargo run --release --example multiview_pooling -- [checkpoint-dir]

mod common;

use meshvae::data::{FamilyKind, SyntheticFamily};
use meshvae::nets::{pool_multiview, Mode};
use meshvae::render::render;
use meshvae::trainer::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshvae::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let config = TrainConfig {
        views: 3,
        batch_size: 15,
        ..common::small_config(300)
    };
    let (trainer, _) = common::model_or_train(checkpoint.as_deref(), config);
    let (model, config) = (&trainer.model, &trainer.config);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = SyntheticFamily::new(FamilyKind::Blocks).sample(&mut rng);
    let (rig, camera) = (config.lighting.rig(), config.camera());
    let views = [0.3, 2.1, 4.0]
        .iter()
        .map(|&theta| render(&shape, theta, config.fixed_lambda, &rig, &camera, [0.0; 3]))
        .collect::<meshvae::Result<Vec<_>>>()?;
    let refs: Vec<_> = views.iter().collect();
    let posts = model.encode(&refs, Mode::Eval)?;
    let pooled = pool_multiview(&posts)?;
    for (v, (p, q)) in posts.iter().zip(&pooled).enumerate() {
        println!(
            "view {v}: own z[0] {:+.3} (std {:.3}) -> pooled z[0] {:+.3} (std {:.3})",
            p.z_mean[0], p.z_std[0], q.z_mean[0], q.z_std[0]
        );
    }
    Ok(())
}
