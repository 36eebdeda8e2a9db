//! The test protocol: render held-out shapes at 24 azimuths, reconstruct each
//! view, and report voxel IoU, median pose error and pose accuracy. Writes
//! per-view and summary CSVs.
//!
//!     cargo run --release --example evaluate_model -- [checkpoint-dir]

mod common;

use meshvae::eval::{evaluate, summary, voxelize, write_metrics, Bounds, EvalSettings};
use meshvae::trainer::TrainConfig;

fn main() -> meshvae::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let config = TrainConfig {
        iterations: 300,
        ..TrainConfig::default()
    };
    let (trainer, test) = common::model_or_train(checkpoint.as_deref(), config);
    let config = &trainer.config;
    let settings = EvalSettings {
        fixed_lambda: config.fixed_lambda,
        ..EvalSettings::new(config.lighting.rig(), config.camera())
    };
    let ev = evaluate(&trainer.model, None, &test, &settings)?;
    let out = common::output_dir("evaluate_model");
    write_metrics(&ev, &out.join("views.csv"), &out.join("metrics.csv"))?;
    println!("{}", summary(&ev.metrics));

    let mut worst = ev.views.clone();
    worst.sort_by(|a, b| a.iou.total_cmp(&b.iou));
    for v in worst.iter().take(3) {
        println!("  low iou: shape {} at {:.0} deg -> {:.3}", v.instance, v.truth.to_degrees(), v.iou);
    }
    let grid = voxelize(&test[0], settings.resolution, Bounds::around(&test[0], settings.margin).unwrap())?;
    grid.export(&out.join("shape0.vox"))?;
    println!("{} of {} voxels occupied in shape 0", grid.occupied(), settings.resolution.pow(3));
    println!("csv files in {}", out.display());
    Ok(())
}
