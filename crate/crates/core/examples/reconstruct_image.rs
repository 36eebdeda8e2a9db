//! Infer shape, pose and lighting from a single image, then re-render the
//! reconstruction at the inferred pose and at a fixed canonical pose. The
//! default model is trained with known poses, so its voxel IoU is measured in
//! the ground-truth frame; a checkpoint trained without poses predicts an
//! azimuth in its own frame.
//!
//!     cargo run --release --example reconstruct_image -- [checkpoint-dir]

mod common;

use meshvae::data::save_obj;
use meshvae::eval::{iou, map_azimuth, voxelize, Bounds};
use meshvae::mesh::Mesh;
use meshvae::nets::Mode;
use meshvae::render::render;

fn main() -> meshvae::Result<()> {
    let checkpoint = std::env::args().nth(1);
    let (trainer, test) = common::model_or_train(checkpoint.as_deref(), common::small_config(500));
    let config = &trainer.config;
    let (rig, camera) = (config.lighting.rig(), config.camera());
    let out = common::output_dir("reconstruct_image");

    for (i, shape) in test.iter().take(4).enumerate() {
        let theta = -2.0 + i as f64;
        let observed = render(shape, theta, config.fixed_lambda, &rig, &camera, [0.0; 3])?;
        let post = trainer.model.encode(&[&observed], Mode::Eval)?.remove(0);
        let mesh = trainer.model.decode(&post.z_mean)?.build()?;
        let predicted = match post.theta_fine {
            Some((mean, _)) => map_azimuth(&post.theta_probs, mean)?,
            None => theta,
        };
        observed.save_png(&out.join(format!("{i}_observed.png")))?;
        render(&mesh, predicted, config.fixed_lambda, &rig, &camera, [0.0; 3])?
            .save_png(&out.join(format!("{i}_reconstruction.png")))?;
        render(&mesh, 0.5, config.fixed_lambda, &rig, &camera, [0.0; 3])?
            .save_png(&out.join(format!("{i}_canonical.png")))?;
        save_obj(&mesh, &out.join(format!("{i}.obj")))?;
        println!(
            "shape {i}: true azimuth {:6.1}, used {:6.1}, voxel iou {:.3}",
            theta.to_degrees(),
            predicted.to_degrees(),
            voxel_iou(shape, &mesh)?
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn voxel_iou(a: &Mesh, b: &Mesh) -> meshvae::Result<f64> {
    let bounds = Bounds::around(a, 0.05).expect("non-empty mesh");
    iou(&voxelize(a, 32, bounds)?, &voxelize(b, 32, bounds)?)
}
