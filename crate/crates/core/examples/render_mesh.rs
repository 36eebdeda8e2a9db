//! Render a two-block mesh under both light rigs, then pull a pixel loss back
//! onto the mesh parameters and the pose angles.
//!
//!     cargo run --release --example render_mesh

mod common;

use std::f64::consts::PI;

use meshvae::mesh::{CameraRig, MeshKind, MeshParams};
use meshvae::render::{render, render_backward, render_with_state, LightRig};

fn main() -> meshvae::Result<()> {
    let out = common::output_dir("render_mesh");
    // seat and back of a chair-like shape: centre(3) + size(3) per block
    let params = MeshParams::new(
        MeshKind::OrthoBlock { blocks: 2 },
        vec![0.0, -0.1, 0.05, 0.9, 0.2, 0.6, 0.0, 0.2, -0.2, 0.9, 0.6, 0.12],
    )?;
    let mesh = params.build()?;
    let camera = CameraRig::with_size(128, 96);

    for (name, rig) in [("colour", LightRig::colour()), ("white", LightRig::white())] {
        for k in 0..4 {
            let theta = k as f64 * PI / 2.0;
            let img = render(&mesh, theta, 0.0, &rig, &camera, [0.0; 3])?;
            img.save_png(&out.join(format!("{name}_{k}.png")))?;
        }
    }

    // d(sum of squared pixels)/d(everything) at one pose
    let state = render_with_state(&mesh, 0.4, 0.3, &LightRig::colour(), &camera, [0.0; 3])?;
    let upstream = state.image.map(|v| 2.0 * v);
    let grads = render_backward(&state, &upstream)?;
    let dparams = params.backward(&grads.object_vertices);
    println!("dL/dtheta = {:.4}, dL/dlambda = {:.4}", grads.theta, grads.lambda);
    println!("dL/d(block 0 size) = {:.4?}", &dparams[3..6]);
    let covered = (0..state.image.width * state.image.height)
        .filter(|&p| state.raster.covered(p))
        .count();
    println!("{covered} of {} pixels covered", state.image.width * state.image.height);

    // non-black background
    let grey = render(&mesh, 0.4, 0.0, &LightRig::white(), &camera, [0.5; 3])?;
    grey.save_png(&out.join("grey_background.png"))?;
    println!("images in {}", out.display());
    Ok(())
}
