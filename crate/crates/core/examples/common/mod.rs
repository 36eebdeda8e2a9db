//! Shared setup for the examples: output directories and a quickly trained model.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use meshvae::data::{FamilyKind, SyntheticFamily};
use meshvae::mesh::Mesh;
use meshvae::trainer::{Dataset, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `target/example-output/<name>`, created if missing.
pub fn output_dir(name: &str) -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root");
    let dir = root.join("target/example-output").join(name);
    std::fs::create_dir_all(&dir).expect("create output directory");
    dir
}

/// Train and test meshes from a synthetic family.
pub fn family_split(kind: FamilyKind, train: usize, test: usize, seed: u64) -> (Vec<Mesh>, Vec<Mesh>) {
    let family = SyntheticFamily::new(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..train).map(|_| family.sample(&mut rng)).collect();
    let b = (0..test).map(|_| family.sample(&mut rng)).collect();
    (a, b)
}

/// A small pose-supervised configuration that trains in well under a minute.
pub fn small_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        pose_supervision: true,
        iterations,
        eval_every: 100,
        ..TrainConfig::default()
    }
}

/// Loads `checkpoint` if given, otherwise trains `config` on blocks for its
/// iteration count and returns the trainer with held-out test meshes.
pub fn model_or_train(checkpoint: Option<&str>, config: TrainConfig) -> (Trainer, Vec<Mesh>) {
    let (train, test) = family_split(FamilyKind::Blocks, 200, 8, config.seed);
    if let Some(dir) = checkpoint {
        return (Trainer::load_checkpoint(Path::new(dir)).expect("load checkpoint"), test);
    }
    let data = Dataset::from_meshes(train, test.clone());
    let mut trainer = Trainer::new(config).expect("valid config");
    let total = trainer.config.iterations;
    eprintln!("training {total} steps (pass a checkpoint directory to skip this)");
    let out = output_dir("scratch-run");
    meshvae::trainer::train(&mut trainer, &data, &out, |step, l| {
        if step % 100 == 0 {
            eprintln!("  step {step}/{total}: loss {:.1}", l.total);
        }
    })
    .expect("training");
    (trainer, test)
}
