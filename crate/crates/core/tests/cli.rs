//! gen-data -> render-data -> train -> evaluate -> sample -> reconstruct ->
//! interpolate through the command-line binary.

use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_meshvae"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "meshvae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let config = dir.path().join("toy.cfg");
    std::fs::write(
        &config,
        "# tiny smoke configuration\n\
         mesh = ortho-block\nmesh_count = 2\n\
         width = 16\nheight = 12\n\
         channels = 4,4,4,4,4\nfeature = 8\nlatent_dim = 3\n\
         theta_bins = 4\nlight_bins = 1\nalpha = 500\nbeta = 5\n\
         batch_size = 4\niterations = 6\neval_every = 3\ncheckpoint_every = 3\nprobe_images = 4\n\
         prerendered = true\n",
    )
    .unwrap();

    run(&["gen-data", "--family", "blocks", "--count", "10", "--views", "2", "--seed", "3", "--config", path(&config), "--out", path(&data)]);
    run(&["render-data", "--seed", "4", "--out", path(&data)]);
    assert_eq!(std::fs::read_dir(data.join("renders")).unwrap().count(), 40);

    run(&["train", "--config", path(&config), "--dataset", path(&data), "--out", path(&run_dir)]);
    let log = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,recon,kl,match_theta,match_lambda,total\n"));
    assert_eq!(log.lines().count(), 7);
    let ckpt = run_dir.join("final");
    assert!(ckpt.join("manifest.json").exists());

    let eval_dir = dir.path().join("eval");
    let summary = run(&["evaluate", "--checkpoint", path(&ckpt), "--dataset", path(&data), "--out", path(&eval_dir)]);
    assert!(summary.contains("iou"));
    assert!(eval_dir.join("metrics.csv").exists());

    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for s in [&s1, &s2] {
        run(&["sample", "--checkpoint", path(&ckpt), "--count", "2", "--seed", "7", "--out", path(s)]);
    }
    assert_eq!(
        std::fs::read(s1.join("sample_001.obj")).unwrap(),
        std::fs::read(s2.join("sample_001.obj")).unwrap()
    );

    let image = data.join("renders").join("blocks_0000_0.png");
    let recon = dir.path().join("recon");
    run(&["reconstruct", "--checkpoint", path(&ckpt), "--image", path(&image), "--out", path(&recon)]);
    for f in ["original.png", "recon.png", "canonical.png", "mesh.obj", "pose.json"] {
        assert!(recon.join(f).exists(), "{f}");
    }

    let other = data.join("renders").join("blocks_0001_0.png");
    let interp = dir.path().join("interp");
    run(&["interpolate", "--checkpoint", path(&ckpt), "--from", path(&image), "--to", path(&other), "--steps", "3", "--out", path(&interp)]);
    assert!(interp.join("interp_002.obj").exists());

    let resumed = Command::new(env!("CARGO_BIN_EXE_meshvae"))
        .args(["train", "--resume", path(&run_dir.join("checkpoints/step-000003")), "--dataset", path(&data)])
        .args(["--out", path(&dir.path().join("resumed"))])
        .output()
        .unwrap();
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "width = 16\nwobble = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_meshvae"))
        .args(["train", "--config", path(&bad), "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_meshvae"))
        .args(["gen-data", "--family", "teapot", "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown family"));
}
