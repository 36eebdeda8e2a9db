use super::*;
use crate::data::{FamilyKind, SyntheticFamily};

fn shapes(n: usize, seed: u64) -> Vec<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = SyntheticFamily::new(FamilyKind::Blocks);
    (0..n).map(|_| family.sample(&mut rng)).collect()
}

fn toy() -> TrainConfig {
    TrainConfig {
        kind: MeshKind::OrthoBlock { blocks: 1 },
        width: 8,
        height: 6,
        channels: [4, 4, 4, 4, 4],
        feature: 8,
        decoder_hidden: 8,
        latent_dim: 2,
        theta_bins: 2,
        light_bins: 1,
        alpha: 50.0,
        beta: 1.0,
        batch_size: 4,
        probe_images: 4,
        eval_every: 5,
        checkpoint_every: 5,
        iterations: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn config_text_round_trips() {
    let c = TrainConfig {
        dataset: Some("data/blocks".into()),
        kind: MeshKind::FullBlock { blocks: 3 },
        loss: LossMode::Silhouette,
        light_rotation: LightRotation::Varying,
        lighting: Lighting::White,
        pose_supervision: true,
        alpha: 1.25e-3,
        views: 3,
        batch_size: 12,
        ..TrainConfig::default()
    };
    let back = TrainConfig::parse(&c.to_text(), Path::new("c.cfg")).unwrap();
    assert_eq!(back, c);
    assert_eq!(TrainConfig::parse(&TrainConfig::paper().to_text(), Path::new("p")).unwrap(), TrainConfig::paper());
}

#[test]
fn config_parse_errors() {
    let p = Path::new("c.cfg");
    let parsed = TrainConfig::parse("# toy\nwidth = 16 # narrow\n\nheight=12\n", p).unwrap();
    assert_eq!((parsed.width, parsed.height), (16, 12));
    let e = TrainConfig::parse("width = 8\nbogus = 1\n", p).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    let e = TrainConfig::parse("lr = fast\n", p).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    assert!(TrainConfig::parse("no equals sign\n", p).is_err());
    assert!(TrainConfig::parse("views = 2\n", p).is_err());
    assert!(TrainConfig::parse("views = 3\nbatch_size = 16\n", p).is_err());
    assert!(TrainConfig::parse("mesh = blob\n", p).is_err());
    assert!(TrainConfig::parse("channels = 1,2,3\n", p).is_err());
}

#[test]
fn minibatch_composition() {
    let data = Dataset::from_meshes(shapes(10, 1), Vec::new());
    let mut c = TrainConfig {
        width: 8,
        height: 6,
        batch_size: 128,
        ..TrainConfig::default()
    };
    let b = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!((b.len(), b.objects()), (128, 128));
    assert!(b.instances.iter().all(|&i| i < 10));

    c.batch_size = 192;
    c.views = 3;
    let b = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!((b.len(), b.objects()), (192, 64));
    for obj in b.instances.chunks(3) {
        assert!(obj.iter().all(|&i| i == obj[0]));
    }
    let again = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(again.instances, b.instances);
    assert_eq!(again.images, b.images);
    assert_eq!(b.annotation_reads(), 0);
    assert!(make_minibatch(&Dataset::default(), &c, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}

#[test]
fn minibatch_lighting_follows_mode() {
    let data = Dataset::from_meshes(shapes(3, 1), Vec::new());
    let mut c = toy();
    c.batch_size = 16;
    c.fixed_lambda = 0.7;
    let b = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((0..16).all(|i| b.annotation(i).lambda == 0.7));
    c.light_rotation = LightRotation::Varying;
    let b = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let lambdas: Vec<f64> = (0..16).map(|i| b.annotation(i).lambda).collect();
    assert!(lambdas.iter().all(|l| (0.0..PI).contains(l)));
    assert!(lambdas.windows(2).any(|w| w[0] != w[1]));
    let thetas: Vec<f64> = (0..16).map(|i| b.annotation(i).theta).collect();
    assert!(thetas.iter().all(|t| (-PI..PI).contains(t)));
}

#[test]
fn clipping() {
    let mut g = vec![vec![6.0], vec![8.0]];
    assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
    assert_eq!(g, vec![vec![3.0], vec![4.0]]);
    let mut g = vec![vec![0.0, 3.0]];
    clip_gradients(&mut g, 5.0);
    assert_eq!(g, vec![vec![0.0, 3.0]]);
    let mut g = vec![vec![1.0, -2.0, 7.0], vec![0.5]];
    clip_gradients(&mut g, 2.5);
    let norm = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 2.5).abs() < 1e-6);
}

fn two_group_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", vec![3], ParamRole::Weight, vec![0.5, -0.25, 1.0]).unwrap();
    s.add("r", vec![3], ParamRole::SlowWeight, vec![0.5, -0.25, 1.0]).unwrap();
    s.add("buf", vec![1], ParamRole::Buffer, vec![2.0]).unwrap();
    s
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut s = two_group_store();
    let before = s.clone();
    let mut state = AdamState::new(&s);
    let lr = LearningRates {
        weight: 1e-3,
        slow_weight: 1e-4,
    };
    adam_step(&mut s, &[vec![0.0; 3], vec![0.0; 3], vec![0.0]], &mut state, lr, &AdamHyper::default()).unwrap();
    assert_eq!(s, before);
    assert_eq!(state.step, 1);
    // moments decay toward zero after a real gradient
    adam_step(&mut s, &[vec![1.0; 3], vec![1.0; 3], vec![1.0]], &mut state, lr, &AdamHyper::default()).unwrap();
    let m = state.m[0][0];
    adam_step(&mut s, &[vec![0.0; 3], vec![0.0; 3], vec![0.0]], &mut state, lr, &AdamHyper::default()).unwrap();
    assert!((state.m[0][0] - 0.9 * m).abs() < 1e-7);
    assert_eq!(s.entries[2].data, vec![2.0]);
}

#[test]
fn adam_first_step_moves_by_lr_per_group() {
    let mut s = two_group_store();
    let before = s.clone();
    let mut state = AdamState::new(&s);
    let g = vec![vec![0.3, -2.0, 50.0], vec![0.3, -2.0, 50.0], vec![9.0]];
    let lr = LearningRates {
        weight: 1e-3,
        slow_weight: 1e-4,
    };
    adam_step(&mut s, &g, &mut state, lr, &AdamHyper::default()).unwrap();
    for j in 0..3 {
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * sign(g)
        let dw = before.entries[0].data[j] - s.entries[0].data[j];
        let dr = before.entries[1].data[j] - s.entries[1].data[j];
        assert!((dw - 1e-3 * g[0][j].signum()).abs() < 1e-7, "{dw}");
        assert!((dw / dr - 10.0).abs() < 1e-2, "{}", dw / dr);
    }
    assert_eq!(s.entries[2], before.entries[2]);
}

#[test]
fn zero_learning_rate_steps_repeat() {
    let data = Dataset::from_meshes(shapes(4, 2), Vec::new());
    let mut t = Trainer::new(TrainConfig {
        lr: 0.0,
        rotation_lr: 0.0,
        ..toy()
    })
    .unwrap();
    let batch = t.next_batch(&data).unwrap();
    let noise = ChaCha8Rng::seed_from_u64(5);
    let a = t.train_step(&batch, &mut noise.clone()).unwrap();
    let b = t.train_step(&batch, &mut noise.clone()).unwrap();
    assert_eq!(a, b);
    assert!(a.total.is_finite() && a.reconstruction > 0.0);
}

#[test]
fn supervised_pose_renders_one_pose_bin() {
    let data = Dataset::from_meshes(shapes(4, 3), Vec::new());
    let config = TrainConfig {
        theta_bins: 12,
        light_bins: 3,
        light_rotation: LightRotation::Varying,
        pose_supervision: true,
        ..toy()
    };
    let mut t = Trainer::new(config.clone()).unwrap();
    let batch = t.next_batch(&data).unwrap();
    t.train_step(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(t.renders(), batch.len() * 3);
    assert_eq!(t.annotation_reads(), batch.len());

    let mut u = Trainer::new(TrainConfig {
        pose_supervision: false,
        ..config
    })
    .unwrap();
    let batch = u.next_batch(&data).unwrap();
    u.train_step(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(u.renders(), batch.len() * 36);
    assert_eq!(u.annotation_reads(), 0);
}

#[test]
fn supervised_loss_uses_the_label() {
    let data = Dataset::from_meshes(shapes(2, 4), Vec::new());
    let c = TrainConfig {
        pose_supervision: true,
        ..toy()
    };
    let t = Trainer::new(c.clone()).unwrap();
    let batch = make_minibatch(&data, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let loss = t.evaluate_batch(&batch).unwrap();
    // the same images scored at a wrong pose give a different reconstruction
    let mut shifted: Vec<Annotation> = (0..batch.len()).map(|i| batch.annotation(i)).collect();
    shifted.iter_mut().for_each(|a| a.theta += 1.0);
    let moved = Batch::new(batch.images.clone(), batch.instances.clone(), shifted, 1, batch.known_lambda).unwrap();
    assert_ne!(t.evaluate_batch(&moved).unwrap().reconstruction, loss.reconstruction);
    assert_eq!(loss.theta_match, 0.0);
    assert_eq!(loss.light_match, 0.0);
}

#[test]
fn modes_run_and_stay_finite() {
    let data = Dataset::from_meshes(shapes(6, 5), Vec::new());
    let variants = [
        TrainConfig {
            views: 3,
            batch_size: 6,
            ..toy()
        },
        TrainConfig {
            loss: LossMode::Silhouette,
            ..toy()
        },
        TrainConfig {
            kind: MeshKind::FullBlock { blocks: 2 },
            lighting: Lighting::White,
            light_rotation: LightRotation::Varying,
            light_bins: 2,
            ..toy()
        },
        TrainConfig {
            kind: MeshKind::Subdivision { segments: 2 },
            ..toy()
        },
    ];
    for c in variants {
        let mut t = Trainer::new(c.clone()).unwrap();
        let rotation = t.model.store.index_of("dec.rotation.w");
        let before = rotation.map(|r| t.model.store.entries[r].data.clone());
        for _ in 0..3 {
            let batch = t.next_batch(&data).unwrap();
            let mut noise = ChaCha8Rng::seed_from_u64(t.step());
            let l = t.train_step(&batch, &mut noise).unwrap();
            assert!(l.total.is_finite(), "{c:?}: {l:?}");
        }
        if let (Some(r), Some(b)) = (rotation, before) {
            let moved = t.model.store.entries[r]
                .data
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(moved > 0.0 && moved <= 3.0 * c.rotation_lr * 1.01, "{moved}");
        }
    }
}

#[test]
fn toy_training_improves_reconstruction() {
    let data = Dataset::from_meshes(shapes(8, 6), shapes(4, 7));
    let config = TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        ..toy()
    };
    let mut t = Trainer::new(config.clone()).unwrap();
    let probe = Probe::new(&data, &config).unwrap();
    let before = t.evaluate_batch(&probe.batch).unwrap();
    for _ in 0..200 {
        let batch = t.next_batch(&data).unwrap();
        let mut noise = ChaCha8Rng::from_rng(&mut t.rng);
        t.train_step(&batch, &mut noise).unwrap();
    }
    let after = t.evaluate_batch(&probe.batch).unwrap();
    assert!(
        after.reconstruction < before.reconstruction,
        "{} -> {}",
        before.reconstruction,
        after.reconstruction
    );
}

#[test]
fn checkpoints_resume_exactly() {
    let data = Dataset::from_meshes(shapes(5, 8), shapes(2, 9));
    let (full, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut a = Trainer::new(toy()).unwrap();
    let report = train(&mut a, &data, full.path(), |_, _| {}).unwrap();
    assert_eq!(report.steps, 10);
    assert_eq!(report.annotation_reads, 0);
    assert!(report.probe_iou.is_some());

    let mut b = Trainer::new(TrainConfig {
        iterations: 5,
        ..toy()
    })
    .unwrap();
    train(&mut b, &data, split.path(), |_, _| {}).unwrap();
    let mut resumed = Trainer::load_checkpoint(&split.path().join("checkpoints/step-000005")).unwrap();
    assert_eq!(resumed.step(), 5);
    assert_eq!(resumed.model.store, b.model.store);
    assert_eq!(resumed.adam, b.adam);
    resumed.config.iterations = 10;
    train(&mut resumed, &data, split.path(), |_, _| {}).unwrap();

    assert_eq!(resumed.model.store, a.model.store);
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read(full.path(), LOSS_LOG), read(split.path(), LOSS_LOG));
    assert_eq!(read(full.path(), LOSS_LOG).lines().count(), 11);
    assert_eq!(read(full.path(), PROBE_LOG).lines().count(), 4);
    assert_eq!(
        std::fs::read(full.path().join("final").join(CHECKPOINT_BLOB)).unwrap(),
        std::fs::read(split.path().join("final").join(CHECKPOINT_BLOB)).unwrap()
    );
}

#[test]
fn checkpoint_rejects_mismatched_layout() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(toy()).unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    let blob = dir.path().join(CHECKPOINT_BLOB);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&blob, bytes).unwrap();
    assert!(Trainer::load_checkpoint(dir.path()).is_err());
    assert!(Trainer::load_checkpoint(&dir.path().join("missing")).is_err());
}
