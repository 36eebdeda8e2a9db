//! Train the same model on open boxes twice, once scoring shaded renders and
//! once scoring silhouettes only. Shading is what reveals the cavity. The
//! subdivision mesh can dent its top face into a tray, where blocks would
//! have to regroup into walls.
//!
//!     cargo run --release --example silhouette_vs_shading -- [iterations]

mod common;

use meshvae::data::FamilyKind;
use meshvae::eval::{evaluate, EvalSettings};
use meshvae::trainer::{train, Dataset, LossMode, Trainer};

fn main() -> meshvae::Result<()> {
    let iterations = std::env::args().nth(1).map_or(800, |n| n.parse().expect("iterations"));
    let (train_meshes, test) = common::family_split(FamilyKind::OpenBox, 200, 8, 4);
    let data = Dataset::from_meshes(train_meshes, test.clone());
    for loss in [LossMode::Shading, LossMode::Silhouette] {
        let config = meshvae::trainer::TrainConfig {
            loss,
            kind: meshvae::mesh::MeshKind::Subdivision { segments: 4 },
            ..common::small_config(iterations)
        };
        let settings = EvalSettings {
            fixed_lambda: config.fixed_lambda,
            ..EvalSettings::new(config.lighting.rig(), config.camera())
        };
        let mut trainer = Trainer::new(config)?;
        let out = common::output_dir(&format!("open_box_{loss:?}").to_lowercase());
        train(&mut trainer, &data, &out, |_, _| {})?;
        let ev = evaluate(&trainer.model, None, &test, &settings)?;
        println!("{loss:?}: iou|theta {:.3}", ev.metrics.iou_given_pose.unwrap_or(ev.metrics.iou));
    }
    Ok(())
}
