//! Build one mesh from each parameterisation and write it as OBJ.
//!
//!     cargo run --release --example mesh_parameterisations

mod common;

use meshvae::data::save_obj;
use meshvae::mesh::{MeshKind, MeshParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> meshvae::Result<()> {
    let out = common::output_dir("mesh_parameterisations");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kinds = [
        MeshKind::OrthoBlock { blocks: 4 },
        MeshKind::FullBlock { blocks: 4 },
        MeshKind::Subdivision { segments: 4 },
    ];
    for kind in kinds {
        let scales = kind.scale_indices();
        let values = (0..kind.param_len())
            .map(|i| {
                if scales.contains(&i) {
                    rng.random_range(0.1..0.5)
                } else if matches!(kind, MeshKind::Subdivision { .. }) {
                    rng.random_range(-0.05..0.05)
                } else {
                    rng.random_range(-0.3..0.3)
                }
            })
            .collect();
        let mesh = MeshParams::new(kind, values)?.build()?;
        let path = out.join(format!("{}.obj", kind.name()));
        save_obj(&mesh, &path)?;
        println!(
            "{:12} {:4} params -> {:4} vertices, {:4} triangles",
            kind.name(),
            kind.param_len(),
            mesh.vertices.len(),
            mesh.triangles.len()
        );
    }
    println!("meshes in {}", out.display());
    Ok(())
}
