//! Score renders of a shape against an observed image with the multi-scale
//! Gaussian likelihood, in shading and silhouette mode. The log-likelihood
//! peaks at the true azimuth, and gradient ascent on theta moves towards it.
//!
//!     cargo run --release --example pyramid_likelihood

use meshvae::data::{FamilyKind, SyntheticFamily};
use meshvae::likelihood::{
    binarise_silhouette, build_pyramid, log_likelihood, log_likelihood_with_grad, DEFAULT_EPSILON, DEFAULT_ETA,
};
use meshvae::mesh::CameraRig;
use meshvae::render::{render, render_backward, render_with_state, LightRig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshvae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mesh = SyntheticFamily::new(FamilyKind::Blocks).sample(&mut rng);
    let camera = CameraRig::with_size(64, 48);
    let rig = LightRig::colour();
    let truth = 1.0;
    let observed = render(&mesh, truth, 0.0, &rig, &camera, [0.0; 3])?;
    let shading = build_pyramid(&observed);
    let silhouette = build_pyramid(&binarise_silhouette(&observed, DEFAULT_ETA));
    println!("pyramid levels: {:?}", shading.shapes());

    println!("{:>8} {:>14} {:>14}", "theta", "shading", "silhouette");
    for k in -6..=6 {
        let theta = truth + k as f64 * 0.1;
        let img = render(&mesh, theta, 0.0, &rig, &camera, [0.0; 3])?;
        let ll = log_likelihood(&shading, &build_pyramid(&img), DEFAULT_EPSILON)?;
        let sil = build_pyramid(&binarise_silhouette(&img, DEFAULT_ETA));
        let ll_sil = log_likelihood(&silhouette, &sil, DEFAULT_EPSILON)?;
        println!("{theta:8.2} {ll:14.1} {ll_sil:14.1}");
    }

    // a few gradient steps on the azimuth from a wrong start
    let mut theta = truth - 0.3;
    for step in 0..8 {
        let state = render_with_state(&mesh, theta, 0.0, &rig, &camera, [0.0; 3])?;
        let (ll, grad) = log_likelihood_with_grad(&shading, &state.image, DEFAULT_EPSILON)?;
        let g = render_backward(&state, &grad)?.theta;
        println!("step {step}: theta {theta:.3} log-likelihood {ll:.1}");
        theta += 0.05 * g.signum();
    }
    Ok(())
}
