use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use meshvae::data::{
    generate_synthetic_dataset, load_split, render_dataset, save_obj, DatasetManifest, FamilyKind, RenderSettings,
    Split, SyntheticFamily, MANIFEST_FILE,
};
use meshvae::eval::{
    evaluate, map_azimuth, map_light_azimuth, summary, voxelize, write_metrics, write_summary, Bounds, EvalSettings,
};
use meshvae::image::Image;
use meshvae::latent::sample_prior;
use meshvae::mesh::Mesh;
use meshvae::nets::{Mode, Model};
use meshvae::render::render;
use meshvae::trainer::{train, Dataset, TrainConfig, Trainer};

/// Generative model of 3D mesh shape, pose and lighting.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Random seed (overrides the config file where both apply).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic shape family into OBJ files and a manifest.
    GenData {
        #[arg(long, default_value = "blocks")]
        family: String,
        #[arg(long, default_value_t = 250)]
        count: usize,
        /// Views rendered per instance by render-data.
        #[arg(long, default_value_t = 1)]
        views: usize,
    },
    /// Render every instance of a dataset with sampled poses (PNG + JSON sidecars).
    RenderData {
        /// Dataset directory (defaults to --out).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        /// Dataset directory (defaults to the config's `dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Decode shapes drawn from the prior to OBJ and PNG.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Reconstruct the shape in one image: OBJ plus renders at the inferred and canonical pose.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Decode a straight line between the latent codes of two images.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Score a checkpoint on a dataset's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Pose-supervised checkpoint for the iou|theta column.
        #[arg(long)]
        pose_given: Option<PathBuf>,
        /// Export voxel grids of the test meshes.
        #[arg(long)]
        voxels: bool,
    },
}

/// Azimuth used for canonical-frame renders.
const CANONICAL_AZIMUTH: f64 = PI / 6.0;

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common.out.clone().context("--out is required")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_config(common: &Common) -> Result<Option<TrainConfig>> {
    common
        .config
        .as_deref()
        .map(|p| TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())))
        .transpose()
}

fn load_model(checkpoint: &Path) -> Result<Trainer> {
    Trainer::load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

fn canonical_render(model: &Model, config: &TrainConfig, mesh: &Mesh) -> Result<Image> {
    Ok(render(
        mesh,
        CANONICAL_AZIMUTH,
        config.fixed_lambda,
        &config.lighting.rig(),
        &config.camera(),
        [0.0; 3],
    )
    .with_context(|| format!("rendering a {} mesh", model.decoder.kind().name()))?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::GenData { family, count, views } => {
            let kind = FamilyKind::parse(family)
                .with_context(|| format!("unknown family {family:?} (blocks, deformed-boxes, open-box)"))?;
            let mut settings = RenderSettings {
                views: *views,
                ..RenderSettings::default()
            };
            if let Some(c) = load_config(common)? {
                settings.width = c.width;
                settings.height = c.height;
                settings.lighting = c.lighting;
                settings.light_rotation = c.light_rotation;
                settings.fixed_lambda = c.fixed_lambda;
            }
            let out = out_dir(common)?;
            let m = generate_synthetic_dataset(SyntheticFamily::new(kind), *count, common.seed.unwrap_or(0), settings, &out)?;
            eprintln!(
                "wrote {} {} meshes ({} train, {} test) to {}",
                m.instances.len(),
                m.class,
                m.split(Split::Train).count(),
                m.split(Split::Test).count(),
                out.display()
            );
        }
        Command::RenderData { dataset } => {
            let root = dataset.clone().or_else(|| common.out.clone()).context("--dataset or --out is required")?;
            let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            let sidecars = render_dataset(&manifest, &root, &mut rng)?;
            eprintln!("rendered {} images into {}", sidecars.len(), root.join("renders").display());
        }
        Command::Train {
            dataset,
            resume,
            iterations,
        } => {
            let mut trainer = match resume {
                Some(dir) => load_model(dir)?,
                None => {
                    let mut config = load_config(common)?.context("train needs --config")?;
                    if let Some(s) = common.seed {
                        config.seed = s;
                    }
                    Trainer::new(config)?
                }
            };
            if let Some(n) = iterations {
                trainer.config.iterations = *n;
            }
            let root = dataset
                .clone()
                .or_else(|| trainer.config.dataset.clone())
                .context("no dataset: pass --dataset or set `dataset` in the config")?;
            let data = Dataset::load(&root, trainer.config.prerendered)
                .with_context(|| format!("loading dataset {}", root.display()))?;
            let out = out_dir(common)?;
            std::fs::write(out.join("config.txt"), trainer.config.to_text())?;
            let report = train(&mut trainer, &data, &out, |step, l| {
                if step % 50 == 0 {
                    eprintln!(
                        "step {step}: total {:.3} recon {:.3} kl {:.3} match {:.4}/{:.4}",
                        l.total, l.reconstruction, l.kl, l.theta_match, l.light_match
                    );
                }
            })?;
            eprintln!(
                "trained to step {}; probe iou {}; checkpoint in {}",
                report.steps,
                report.probe_iou.map_or("n/a".into(), |v| format!("{v:.3}")),
                out.join("final").display()
            );
        }
        Command::Sample { checkpoint, count } => {
            let t = load_model(checkpoint)?;
            let out = out_dir(common)?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            for i in 0..*count {
                let (z, _, _) = sample_prior(&mut rng, t.config.latent_dim);
                let mesh = t.model.decode(&z.0)?.build()?;
                save_obj(&mesh, &out.join(format!("sample_{i:03}.obj")))?;
                canonical_render(&t.model, &t.config, &mesh)?.save_png(&out.join(format!("sample_{i:03}.png")))?;
            }
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Command::Reconstruct { checkpoint, image } => {
            let t = load_model(checkpoint)?;
            let out = out_dir(common)?;
            let img = Image::load_png(image)?;
            let post = t.model.encode(&[&img], Mode::Eval)?.remove(0);
            let mesh = t.model.decode(&post.z_mean)?.build()?;
            let theta = match post.theta_fine {
                Some((mean, _)) => map_azimuth(&post.theta_probs, mean)?,
                None => CANONICAL_AZIMUTH,
            };
            let lambda = match post.light_fine {
                Some((mean, _)) => map_light_azimuth(&post.light_probs, mean)?,
                None => t.config.fixed_lambda,
            };
            let rig = t.config.lighting.rig();
            img.save_png(&out.join("original.png"))?;
            render(&mesh, theta, lambda, &rig, &t.config.camera(), [0.0; 3])?.save_png(&out.join("recon.png"))?;
            canonical_render(&t.model, &t.config, &mesh)?.save_png(&out.join("canonical.png"))?;
            save_obj(&mesh, &out.join("mesh.obj"))?;
            let pose = serde_json::json!({ "theta": theta, "lambda": lambda, "z": post.z_mean });
            std::fs::write(out.join("pose.json"), serde_json::to_string_pretty(&pose)?)?;
            eprintln!("azimuth {:.1} deg; outputs in {}", theta.to_degrees(), out.display());
        }
        Command::Interpolate {
            checkpoint,
            from,
            to,
            steps,
        } => {
            if *steps < 2 {
                bail!("--steps must be at least 2");
            }
            let t = load_model(checkpoint)?;
            let out = out_dir(common)?;
            let (a, b) = (Image::load_png(from)?, Image::load_png(to)?);
            let posts = t.model.encode(&[&a, &b], Mode::Eval)?;
            for k in 0..*steps {
                let s = k as f64 / (*steps - 1) as f64;
                let z: Vec<f64> = posts[0]
                    .z_mean
                    .iter()
                    .zip(&posts[1].z_mean)
                    .map(|(x, y)| (1.0 - s) * x + s * y)
                    .collect();
                let mesh = t.model.decode(&z)?.build()?;
                save_obj(&mesh, &out.join(format!("interp_{k:03}.obj")))?;
                canonical_render(&t.model, &t.config, &mesh)?.save_png(&out.join(format!("interp_{k:03}.png")))?;
            }
            eprintln!("wrote {steps} interpolated shapes to {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            pose_given,
            voxels,
        } => {
            let t = load_model(checkpoint)?;
            let given = pose_given.as_deref().map(load_model).transpose()?;
            let out = out_dir(common)?;
            let manifest = DatasetManifest::load(&dataset.join(MANIFEST_FILE))?;
            let (ids, test): (Vec<String>, Vec<Mesh>) = load_split(&manifest, dataset, Split::Test)?.into_iter().unzip();
            let settings = EvalSettings {
                fixed_lambda: t.config.fixed_lambda,
                seed: common.seed.unwrap_or(0),
                ..EvalSettings::new(t.config.lighting.rig(), t.config.camera())
            };
            let ev = evaluate(&t.model, given.as_ref().map(|g| &g.model), &test, &settings)?;
            write_metrics(&ev, &out.join("views.csv"), &out.join("metrics.csv"))?;
            write_summary(&out.join("summary.txt"), &ev.metrics)?;
            if *voxels {
                for (id, mesh) in ids.iter().zip(&test) {
                    let b = Bounds::around(mesh, settings.margin).context("empty test mesh")?;
                    voxelize(mesh, settings.resolution, b)?.export(&out.join(format!("{id}.vox")))?;
                }
            }
            println!("{}", summary(&ev.metrics));
        }
    }
    Ok(())
}
