//! Train with the azimuth given at training time (no pose posterior), then
//! score voxel IoU on held-out shapes rendered at known poses.
//!
//!     cargo run --release --example train_supervised -- [iterations]

mod common;

use meshvae::data::FamilyKind;
use meshvae::eval::{evaluate, summary, EvalSettings};
use meshvae::trainer::{train, Dataset, Trainer};

fn main() -> meshvae::Result<()> {
    let iterations = std::env::args().nth(1).map_or(600, |n| n.parse().expect("iterations"));
    let config = common::small_config(iterations);
    let (train_meshes, test) = common::family_split(FamilyKind::Blocks, 200, 10, 1);
    let data = Dataset::from_meshes(train_meshes, test.clone());
    let settings = EvalSettings {
        fixed_lambda: config.fixed_lambda,
        ..EvalSettings::new(config.lighting.rig(), config.camera())
    };

    let mut trainer = Trainer::new(config)?;
    let before = evaluate(&trainer.model, Some(&trainer.model), &test, &settings)?;
    let out = common::output_dir("train_supervised");
    let report = train(&mut trainer, &data, &out, |step, l| {
        if step % 100 == 0 {
            println!("step {step}: recon {:.0} kl {:.2}", l.reconstruction, l.kl);
        }
    })?;
    let after = evaluate(&trainer.model, Some(&trainer.model), &test, &settings)?;
    println!("untrained: {}", summary(&before.metrics));
    println!("trained:   {}", summary(&after.metrics));
    println!("{} pose labels read; logs and checkpoint in {}", report.annotation_reads, out.display());
    Ok(())
}
