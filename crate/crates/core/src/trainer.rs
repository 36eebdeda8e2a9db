//! The optimisation loop: minibatches, per-bin rendering, loss assembly,
//! clipped ADAM, checkpoints and logs.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_rendered, load_split, write_atomic, Annotation, DatasetManifest, LightRotation, Lighting, Split,
};
use crate::error::{contract, io_err, Error, Result};
use crate::eval::{iou, voxelize, Bounds, DEFAULT_RESOLUTION};
use crate::image::Image;
use crate::latent::{assemble_loss, assemble_loss_grad, LossBreakdown, LossWeights, ReconTable};
use crate::likelihood::{
    binarise_silhouette, binarise_silhouette_backward, build_pyramid, log_likelihood_with_grad,
};
use crate::mesh::{compose_azimuth, compose_light_azimuth, CameraRig, Mesh, MeshKind, MeshParams, Vec3};
use crate::nets::{
    images_to_tensor, pool_views, read_posteriors, round_f32, BatchStats, Mode, Model, NetConfig, ParamRole,
    ParamStore, Tape, Tensor,
};
use crate::render::{render, render_backward_with, render_with_state, EdgeGradients, LightRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Shading,
    /// Compare soft silhouettes `p / (p + eta)` instead of shaded pixels.
    Silhouette,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Dataset directory holding `manifest.json`.
    pub dataset: Option<PathBuf>,
    /// Read images written by `render-data` instead of rendering on the fly.
    pub prerendered: bool,
    pub kind: MeshKind,
    pub width: usize,
    pub height: usize,
    pub channels: [usize; 5],
    pub feature: usize,
    pub decoder_hidden: usize,
    pub latent_dim: usize,
    pub theta_bins: usize,
    pub light_bins: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub lr: f64,
    pub rotation_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub views: usize,
    pub lighting: Lighting,
    pub light_rotation: LightRotation,
    pub fixed_lambda: f64,
    pub loss: LossMode,
    pub pose_supervision: bool,
    pub iterations: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub probe_images: usize,
}

impl Default for TrainConfig {
    /// Desk-scale settings: 32x24 images, batch 16, eight pose bins.
    fn default() -> Self {
        TrainConfig {
            dataset: None,
            prerendered: false,
            kind: MeshKind::OrthoBlock { blocks: 4 },
            width: 32,
            height: 24,
            channels: [16, 32, 32, 64, 64],
            feature: 64,
            decoder_hidden: 32,
            latent_dim: 12,
            theta_bins: 8,
            light_bins: 3,
            alpha: 2.5e4,
            beta: 50.0,
            epsilon: 0.1,
            eta: 0.01,
            lr: 1e-3,
            rotation_lr: 1e-4,
            clip_norm: 5.0,
            batch_size: 16,
            views: 1,
            lighting: Lighting::Colour,
            light_rotation: LightRotation::Fixed,
            fixed_lambda: 0.0,
            loss: LossMode::Shading,
            pose_supervision: false,
            iterations: 1000,
            seed: 0,
            eval_every: 250,
            checkpoint_every: 1000,
            probe_images: 16,
        }
    }
}

fn parse_value<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{v:?} is not a boolean")),
    }
}

impl TrainConfig {
    /// The published settings: 128x96 images, batches of 128, twelve pose bins.
    pub fn paper() -> Self {
        TrainConfig {
            width: 128,
            height: 96,
            channels: [32, 64, 96, 128, 128],
            feature: 128,
            theta_bins: 12,
            alpha: 5e5,
            beta: 1e3,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            width: self.width,
            height: self.height,
            channels: self.channels,
            feature: self.feature,
            latent_dim: self.latent_dim,
            decoder_hidden: self.decoder_hidden,
            theta_bins: self.theta_bins,
            light_bins: self.light_bins,
            infer_pose: !self.pose_supervision,
            infer_light: self.light_rotation == LightRotation::Varying,
            kind: self.kind,
        }
    }

    pub fn camera(&self) -> CameraRig {
        CameraRig::with_size(self.width, self.height)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        self.net_config().validate()?;
        if ![self.epsilon, self.eta, self.clip_norm].iter().all(|&v| v > 0.0 && v.is_finite()) {
            return bad("epsilon, eta and clip_norm must be positive");
        }
        if !(self.lr >= 0.0 && self.rotation_lr >= 0.0 && self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("learning rates and loss weights must be non-negative");
        }
        if self.views != 1 && self.views != 3 {
            return bad("views must be 1 or 3");
        }
        if self.batch_size == 0 || self.batch_size % self.views != 0 {
            return bad("batch_size must be a positive multiple of views");
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 || self.probe_images == 0 {
            return bad("eval_every, checkpoint_every and probe_images must be positive");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut mesh_name = c.kind.name().to_string();
        let mut mesh_count = match c.kind {
            MeshKind::OrthoBlock { blocks } | MeshKind::FullBlock { blocks } => blocks,
            MeshKind::Subdivision { segments } => segments,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "dataset" => c.dataset = Some(PathBuf::from(v)),
                    "prerendered" => c.prerendered = parse_bool(v)?,
                    "mesh" => mesh_name = v.to_string(),
                    "mesh_count" => mesh_count = parse_value(v)?,
                    "width" => c.width = parse_value(v)?,
                    "height" => c.height = parse_value(v)?,
                    "channels" => {
                        let parts: Vec<usize> = v
                            .split(',')
                            .map(|p| parse_value(p.trim()))
                            .collect::<std::result::Result<_, _>>()?;
                        c.channels = parts
                            .try_into()
                            .map_err(|_| "channels needs five comma-separated widths".to_string())?;
                    }
                    "feature" => c.feature = parse_value(v)?,
                    "decoder_hidden" => c.decoder_hidden = parse_value(v)?,
                    "latent_dim" => c.latent_dim = parse_value(v)?,
                    "theta_bins" => c.theta_bins = parse_value(v)?,
                    "light_bins" => c.light_bins = parse_value(v)?,
                    "alpha" => c.alpha = parse_value(v)?,
                    "beta" => c.beta = parse_value(v)?,
                    "epsilon" => c.epsilon = parse_value(v)?,
                    "eta" => c.eta = parse_value(v)?,
                    "lr" => c.lr = parse_value(v)?,
                    "rotation_lr" => c.rotation_lr = parse_value(v)?,
                    "clip_norm" => c.clip_norm = parse_value(v)?,
                    "batch_size" => c.batch_size = parse_value(v)?,
                    "views" => c.views = parse_value(v)?,
                    "lighting" => {
                        c.lighting = match v {
                            "colour" => Lighting::Colour,
                            "white" => Lighting::White,
                            _ => return Err(format!("lighting must be colour or white, got {v:?}")),
                        }
                    }
                    "light_rotation" => {
                        c.light_rotation = match v {
                            "fixed" => LightRotation::Fixed,
                            "varying" => LightRotation::Varying,
                            _ => return Err(format!("light_rotation must be fixed or varying, got {v:?}")),
                        }
                    }
                    "fixed_lambda" => c.fixed_lambda = parse_value(v)?,
                    "loss" => {
                        c.loss = match v {
                            "shading" => LossMode::Shading,
                            "silhouette" => LossMode::Silhouette,
                            _ => return Err(format!("loss must be shading or silhouette, got {v:?}")),
                        }
                    }
                    "pose_supervision" => c.pose_supervision = parse_bool(v)?,
                    "iterations" => c.iterations = parse_value(v)?,
                    "seed" => c.seed = parse_value(v)?,
                    "eval_every" => c.eval_every = parse_value(v)?,
                    "checkpoint_every" => c.checkpoint_every = parse_value(v)?,
                    "probe_images" => c.probe_images = parse_value(v)?,
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        c.kind = MeshKind::parse(&mesh_name, mesh_count)
            .ok_or_else(|| Error::Config(format!("unknown mesh parameterisation {mesh_name:?}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        TrainConfig::parse(&text, path)
    }

    /// Serialises every key; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let count = match self.kind {
            MeshKind::OrthoBlock { blocks } | MeshKind::FullBlock { blocks } => blocks,
            MeshKind::Subdivision { segments } => segments,
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(d) = &self.dataset {
            kv("dataset", d.display().to_string());
        }
        kv("prerendered", self.prerendered.to_string());
        kv("mesh", self.kind.name().into());
        kv("mesh_count", count.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv(
            "channels",
            self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("feature", self.feature.to_string());
        kv("decoder_hidden", self.decoder_hidden.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("theta_bins", self.theta_bins.to_string());
        kv("light_bins", self.light_bins.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("eta", self.eta.to_string());
        kv("lr", self.lr.to_string());
        kv("rotation_lr", self.rotation_lr.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("views", self.views.to_string());
        kv(
            "lighting",
            match self.lighting {
                Lighting::Colour => "colour",
                Lighting::White => "white",
            }
            .into(),
        );
        kv(
            "light_rotation",
            match self.light_rotation {
                LightRotation::Fixed => "fixed",
                LightRotation::Varying => "varying",
            }
            .into(),
        );
        kv("fixed_lambda", self.fixed_lambda.to_string());
        kv(
            "loss",
            match self.loss {
                LossMode::Shading => "shading",
                LossMode::Silhouette => "silhouette",
            }
            .into(),
        );
        kv("pose_supervision", self.pose_supervision.to_string());
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("probe_images", self.probe_images.to_string());
        s
    }
}

/// Training shapes, optionally with pre-rendered views, and held-out shapes
/// for the probe set.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub meshes: Vec<Mesh>,
    /// Per training instance: rendered images with their annotations.
    pub views: Option<Vec<Vec<(Image, Annotation)>>>,
    pub probe: Vec<Mesh>,
}

impl Dataset {
    pub fn from_meshes(meshes: Vec<Mesh>, probe: Vec<Mesh>) -> Self {
        Dataset {
            meshes,
            views: None,
            probe,
        }
    }

    /// Loads the train split (and test split as probe shapes) of a dataset
    /// directory. With `prerendered`, training images come from `render-data`.
    pub fn load(root: &Path, prerendered: bool) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(crate::data::MANIFEST_FILE))?;
        let meshes = load_split(&manifest, root, Split::Train)?.into_iter().map(|(_, m)| m).collect();
        let probe = load_split(&manifest, root, Split::Test)?.into_iter().map(|(_, m)| m).collect();
        let views = if prerendered {
            Some(
                load_rendered(&manifest, root, Split::Train)?
                    .into_iter()
                    .map(|(_, vs)| vs.into_iter().map(|(img, s)| (img, s.annotation)).collect())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Dataset { meshes, views, probe })
    }
}

/// A minibatch. Images are grouped object-major, `views` per object.
/// Ground-truth annotations are readable only through [`Batch::annotation`],
/// which counts every access.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Image>,
    /// Dataset instance of each image.
    pub instances: Vec<usize>,
    pub views: usize,
    /// Lighting angle of every image when lighting is fixed.
    pub known_lambda: f64,
    annotations: Vec<Annotation>,
    reads: Cell<usize>,
}

impl Batch {
    pub fn new(
        images: Vec<Image>,
        instances: Vec<usize>,
        annotations: Vec<Annotation>,
        views: usize,
        known_lambda: f64,
    ) -> Result<Self> {
        if images.is_empty() || views == 0 || images.len() % views != 0 {
            return contract("a batch needs a whole number of objects");
        }
        if instances.len() != images.len() || annotations.len() != images.len() {
            return Err(Error::Shape("batch images, instances and annotations differ in length".into()));
        }
        Ok(Batch {
            images,
            instances,
            views,
            known_lambda,
            annotations,
            reads: Cell::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn objects(&self) -> usize {
        self.images.len() / self.views
    }

    pub fn annotation(&self, i: usize) -> Annotation {
        self.reads.set(self.reads.get() + 1);
        self.annotations[i]
    }

    pub fn annotation_reads(&self) -> usize {
        self.reads.get()
    }
}

/// Draws `batch_size / views` instances uniformly with replacement and
/// `views` images of each, with azimuths from Uniform(-pi, pi) and, when
/// lighting varies, lighting angles from Uniform(0, pi).
pub fn make_minibatch<R: Rng + ?Sized>(dataset: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let n = dataset.meshes.len();
    if n == 0 {
        return contract("the dataset has no training instances");
    }
    let objects = config.batch_size / config.views;
    let mut images = Vec::with_capacity(config.batch_size);
    let mut instances = Vec::with_capacity(config.batch_size);
    let mut annotations = Vec::with_capacity(config.batch_size);
    let rig = config.lighting.rig();
    let camera = config.camera();
    for _ in 0..objects {
        let inst = rng.random_range(0..n);
        for _ in 0..config.views {
            let (img, ann) = match &dataset.views {
                Some(views) => {
                    let vs = &views[inst];
                    if vs.is_empty() {
                        return contract(format!("instance {inst} has no rendered views"));
                    }
                    vs[rng.random_range(0..vs.len())].clone()
                }
                None => {
                    let theta = rng.random_range(-PI..PI);
                    let lambda = match config.light_rotation {
                        LightRotation::Fixed => config.fixed_lambda,
                        LightRotation::Varying => rng.random_range(0.0..PI),
                    };
                    let img = render(&dataset.meshes[inst], theta, lambda, &rig, &camera, [0.0; 3])?;
                    (img, Annotation { theta, lambda })
                }
            };
            if img.width != config.width || img.height != config.height {
                return Err(Error::Shape(format!(
                    "dataset image is {}x{}, config expects {}x{}",
                    img.width, img.height, config.width, config.height
                )));
            }
            images.push(img);
            instances.push(inst);
            annotations.push(ann);
        }
    }
    Batch::new(images, instances, annotations, config.views, config.fixed_lambda)
}

/// Scales every gradient by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. Returns `g`.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate per parameter role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub weight: f64,
    pub slow_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected ADAM update of every non-buffer parameter. Parameters
/// and moments are stored rounded to `f32`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: LearningRates,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != store.entries.len() || state.m.len() != store.entries.len() {
        return Err(Error::Shape("gradients, optimiser state and parameters differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (k, entry) in store.entries.iter_mut().enumerate() {
        let rate = match entry.role {
            ParamRole::Weight => lr.weight,
            ParamRole::SlowWeight => lr.slow_weight,
            ParamRole::Buffer => continue,
        };
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        if g.len() != entry.data.len() {
            return Err(Error::Shape(format!("gradient for {} has the wrong length", entry.name)));
        }
        for j in 0..g.len() {
            m[j] = round_f32(hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j]);
            v[j] = round_f32(hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j]);
            let update = rate * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
            entry.data[j] = round_f32(entry.data[j] - update);
        }
    }
    Ok(())
}

/// Loss, parameter gradients and batch-norm statistics of one forward pass.
struct Pass {
    loss: LossBreakdown,
    grads: Option<Vec<Vec<f64>>>,
    stats: Vec<BatchStats>,
    renders: usize,
}

/// Likelihood of one rendered bin and its partial derivatives.
struct BinScore {
    value: f64,
    vertices: Vec<Vec3>,
    theta: f64,
    lambda: f64,
}

fn normals(rng: &mut Option<&mut dyn RngCore>, n: usize) -> Vec<f64> {
    match rng {
        Some(r) => (0..n).map(|_| StandardNormal.sample(r)).collect(),
        None => vec![0.0; n],
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Drives minibatch sampling and reparameterisation noise.
    pub rng: ChaCha8Rng,
    /// Edge treatment in the renderer's backward pass.
    pub edges: EdgeGradients,
    rig: LightRig,
    camera: CameraRig,
    renders: usize,
    annotation_reads: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.net_config(), config.seed)?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            rig: config.lighting.rig(),
            camera: config.camera(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            edges: EdgeGradients::Boundary,
            config,
            model,
            adam,
            renders: 0,
            annotation_reads: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Total renders performed by training steps so far.
    pub fn renders(&self) -> usize {
        self.renders
    }

    /// Ground-truth annotations read by training steps so far.
    pub fn annotation_reads(&self) -> usize {
        self.annotation_reads
    }

    fn score_bins(&self, mesh: &Mesh, observed: &Image, thetas: &[f64], lambdas: &[f64], grads: bool) -> Result<Vec<BinScore>> {
        let silhouette = self.config.loss == LossMode::Silhouette;
        let eta = self.config.eta;
        let obs = if silhouette {
            binarise_silhouette(observed, eta)
        } else {
            observed.clone()
        };
        let obs_pyr = build_pyramid(&obs);
        let mut out = Vec::with_capacity(thetas.len() * lambdas.len());
        for &theta in thetas {
            for &lambda in lambdas {
                let state = render_with_state(mesh, theta, lambda, &self.rig, &self.camera, [0.0; 3])?;
                let (value, d_img) = if silhouette {
                    let s = binarise_silhouette(&state.image, eta);
                    let (v, g) = log_likelihood_with_grad(&obs_pyr, &s, self.config.epsilon)?;
                    (v, binarise_silhouette_backward(&state.image, &g, eta))
                } else {
                    log_likelihood_with_grad(&obs_pyr, &state.image, self.config.epsilon)?
                };
                let score = if grads {
                    let rg = render_backward_with(&state, &d_img, self.edges)?;
                    BinScore {
                        value,
                        vertices: rg.object_vertices,
                        theta: rg.theta,
                        lambda: rg.lambda,
                    }
                } else {
                    BinScore {
                        value,
                        vertices: Vec::new(),
                        theta: 0.0,
                        lambda: 0.0,
                    }
                };
                out.push(score);
            }
        }
        Ok(out)
    }

    /// Forward pass over a batch. With `rng`, runs in training mode with
    /// sampled latents; without, in evaluation mode at the posterior means.
    fn pass(&self, batch: &Batch, mut rng: Option<&mut dyn RngCore>, want_grads: bool) -> Result<Pass> {
        let model = &self.model;
        let store = &model.store;
        let mode = if rng.is_some() { Mode::Train } else { Mode::Eval };
        let n = batch.len();
        let views = batch.views;
        let objects = batch.objects();
        let d = model.config.latent_dim;

        let mut tape = Tape::new();
        let refs: Vec<&Image> = batch.images.iter().collect();
        let x = tape.leaf(images_to_tensor(&refs)?);
        let nodes = model.encoder.forward(&mut tape, store, x, mode)?;
        let (zm, zs) = if views > 1 {
            pool_views(&mut tape, nodes.z_mean, nodes.z_std, views)?
        } else {
            (nodes.z_mean, nodes.z_std)
        };
        let ez = tape.leaf(Tensor::new(vec![objects, d], normals(&mut rng, objects * d))?);
        let spread = tape.mul(zs, ez)?;
        let z = tape.add(zm, spread)?;
        let out = model.decoder.forward(&mut tape, store, z)?;
        let kind = model.decoder.kind();
        let plen = kind.param_len();
        let mesh_params: Vec<MeshParams> = (0..objects)
            .map(|o| MeshParams::new(kind, tape.value(out).row(o).to_vec()))
            .collect::<Result<_>>()?;
        let meshes: Vec<Mesh> = mesh_params.iter().map(MeshParams::build).collect::<Result<_>>()?;

        let mut posts = read_posteriors(&tape, &nodes);
        for (i, p) in posts.iter_mut().enumerate() {
            p.z_mean = tape.value(zm).row(i / views).to_vec();
            p.z_std = tape.value(zs).row(i / views).to_vec();
        }
        let e_theta = if nodes.theta.is_some() { normals(&mut rng, n) } else { vec![0.0; n] };
        let e_light = if nodes.light.is_some() { normals(&mut rng, n) } else { vec![0.0; n] };

        let mut values = Vec::new();
        let mut scores = Vec::with_capacity(n);
        let mut renders = 0;
        for (i, post) in posts.iter().enumerate() {
            let thetas: Vec<f64> = match post.theta_fine {
                Some((m, s)) => {
                    let r = post.theta_probs.len();
                    (0..r).map(|b| compose_azimuth(b, m + s * e_theta[i], r)).collect::<Result<_>>()?
                }
                None => vec![batch.annotation(i).theta],
            };
            let lambdas: Vec<f64> = match post.light_fine {
                Some((m, s)) => {
                    let r = post.light_probs.len();
                    (0..r)
                        .map(|b| compose_light_azimuth(b, m + s * e_light[i], r))
                        .collect::<Result<_>>()?
                }
                None => vec![batch.known_lambda],
            };
            let bins = self.score_bins(&meshes[i / views], &batch.images[i], &thetas, &lambdas, want_grads)?;
            renders += bins.len();
            values.extend(bins.iter().map(|b| b.value));
            scores.push(bins);
        }
        let table = ReconTable::new(n, posts[0].theta_probs.len(), posts[0].light_probs.len(), values)?;
        let weights = self.config.weights();
        let loss = assemble_loss(&table, &posts, weights)?;
        if !loss.total.is_finite() {
            return contract(format!("loss is not finite: {loss:?}"));
        }
        let stats = std::mem::take(&mut tape.batch_stats);
        if !want_grads {
            return Ok(Pass {
                loss,
                grads: None,
                stats,
                renders,
            });
        }

        let lg = assemble_loss_grad(&table, &posts, weights)?;
        let per_image = table.theta_bins * table.light_bins;
        let mut d_out = vec![0.0; objects * plen];
        let mut d_zm = vec![0.0; objects * d];
        let mut d_zs = vec![0.0; objects * d];
        let mut d_theta = (Vec::new(), Vec::new(), Vec::new());
        let mut d_light = (Vec::new(), Vec::new(), Vec::new());
        for (i, bins) in scores.iter().enumerate() {
            let o = i / views;
            let mut dv = vec![Vec3::zeros(); meshes[o].vertices.len()];
            let (mut dt, mut dl) = (0.0, 0.0);
            for (k, b) in bins.iter().enumerate() {
                let w = lg.table[i * per_image + k];
                for (a, g) in dv.iter_mut().zip(&b.vertices) {
                    *a += w * g;
                }
                dt += w * b.theta;
                dl += w * b.lambda;
            }
            for (a, g) in d_out[o * plen..(o + 1) * plen].iter_mut().zip(mesh_params[o].backward(&dv)) {
                *a += g;
            }
            let gp = &lg.params[i];
            for k in 0..d {
                d_zm[o * d + k] += gp.z_mean[k];
                d_zs[o * d + k] += gp.z_std[k];
            }
            if let Some((km, ks)) = gp.theta_fine {
                d_theta.0.extend_from_slice(&gp.theta_probs);
                d_theta.1.push(dt + km);
                d_theta.2.push(dt * e_theta[i] + ks);
            }
            if let Some((km, ks)) = gp.light_fine {
                d_light.0.extend_from_slice(&gp.light_probs);
                d_light.1.push(dl + km);
                d_light.2.push(dl * e_light[i] + ks);
            }
        }
        let mut inputs = vec![(out, d_out), (zm, d_zm), (zs, d_zs)];
        for (head, g) in [(nodes.theta, d_theta), (nodes.light, d_light)] {
            if let Some(a) = head {
                inputs.extend([(a.probs, g.0), (a.mean, g.1), (a.std, g.2)]);
            }
        }
        let root = tape.custom(loss.total, inputs)?;
        let grads = tape.backward(root, store)?;
        Ok(Pass {
            loss,
            grads: Some(grads),
            stats,
            renders,
        })
    }

    /// One optimisation step on `batch`, drawing reparameterisation noise
    /// from `rng`. Returns the loss before the update.
    pub fn train_step<R: RngCore>(&mut self, batch: &Batch, rng: &mut R) -> Result<LossBreakdown> {
        let reads = batch.annotation_reads();
        let pass = self.pass(batch, Some(rng), true)?;
        self.renders += pass.renders;
        self.annotation_reads += batch.annotation_reads() - reads;
        let mut grads = pass.grads.expect("gradients were requested");
        clip_gradients(&mut grads, self.config.clip_norm);
        let lr = LearningRates {
            weight: self.config.lr,
            slow_weight: self.config.rotation_lr,
        };
        adam_step(&mut self.model.store, &grads, &mut self.adam, lr, &AdamHyper::default())?;
        self.model.store.update_running_stats(&pass.stats);
        Ok(pass.loss)
    }

    /// Training-mode loss and its gradient for every parameter, without
    /// updating anything.
    pub fn loss_and_gradients<R: RngCore>(&self, batch: &Batch, rng: &mut R) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let pass = self.pass(batch, Some(rng), true)?;
        Ok((pass.loss, pass.grads.expect("gradients were requested")))
    }

    /// Loss on `batch` in evaluation mode at the posterior means, without
    /// updating anything.
    pub fn evaluate_batch(&self, batch: &Batch) -> Result<LossBreakdown> {
        Ok(self.pass(batch, None, false)?.loss)
    }

    /// Draws the next training minibatch from the trainer's generator.
    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        make_minibatch(dataset, &self.config, &mut self.rng)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

/// A fixed held-out batch, rendered once from a seed derived from the
/// training seed.
pub struct Probe {
    pub batch: Batch,
    pub meshes: Vec<Mesh>,
}

impl Probe {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let meshes = if dataset.probe.is_empty() {
            dataset.meshes.clone()
        } else {
            dataset.probe.clone()
        };
        let source = Dataset::from_meshes(meshes.clone(), Vec::new());
        let probe_config = TrainConfig {
            batch_size: config.probe_images,
            views: 1,
            ..config.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let batch = make_minibatch(&source, &probe_config, &mut rng)?;
        Ok(Probe { batch, meshes })
    }

    /// Mean voxel IOU between each probe shape and the shape decoded from
    /// its image, both in the canonical frame.
    pub fn shape_iou(&self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        for (img, &inst) in self.batch.images.iter().zip(&self.batch.instances) {
            let gt = &self.meshes[inst];
            let post = model.encode(&[img], Mode::Eval)?.remove(0);
            let pred = model.decode(&post.z_mean)?.build()?;
            let bounds = Bounds::around(gt, 0.05).ok_or_else(|| Error::Contract("empty probe mesh".into()))?;
            total += iou(
                &voxelize(&pred, DEFAULT_RESOLUTION, bounds)?,
                &voxelize(gt, DEFAULT_RESOLUTION, bounds)?,
            )?;
        }
        Ok(total / self.batch.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub last: LossBreakdown,
    pub probe_iou: Option<f64>,
    pub annotation_reads: usize,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const PROBE_LOG: &str = "probe.csv";
pub const FINAL_CHECKPOINT: &str = "final";

fn open_log(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(format!("opening {}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    Ok(w)
}

fn loss_record(step: u64, l: &LossBreakdown) -> Vec<String> {
    vec![
        step.to_string(),
        l.reconstruction.to_string(),
        l.kl.to_string(),
        l.theta_match.to_string(),
        l.light_match.to_string(),
        l.total.to_string(),
    ]
}

const LOSS_HEADER: [&str; 6] = ["step", "recon", "kl", "match_theta", "match_lambda", "total"];

/// Runs training up to `config.iterations` steps, continuing from the
/// trainer's current step. Appends per-step losses to `out/loss.csv`,
/// probe-set evaluations to `out/probe.csv`, and writes checkpoints under
/// `out/checkpoints/` plus `out/final/`.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    out: &Path,
    mut progress: impl FnMut(u64, &LossBreakdown),
) -> Result<TrainReport> {
    std::fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let probe = Probe::new(dataset, &trainer.config)?;
    let mut loss_log = open_log(&out.join(LOSS_LOG), &LOSS_HEADER)?;
    let mut probe_log = open_log(
        &out.join(PROBE_LOG),
        &["step", "recon", "kl", "match_theta", "match_lambda", "total", "iou"],
    )?;
    let mut probe_iou = None;
    let mut snapshot = |trainer: &Trainer| -> Result<()> {
        let l = trainer.evaluate_batch(&probe.batch)?;
        let v = probe.shape_iou(&trainer.model)?;
        let mut rec = loss_record(trainer.step(), &l);
        rec.push(v.to_string());
        probe_log.write_record(&rec)?;
        probe_log.flush().map_err(io_err("writing probe log"))?;
        probe_iou = Some(v);
        Ok(())
    };
    if trainer.step() == 0 {
        snapshot(trainer)?;
    }
    let mut last = LossBreakdown::default();
    while trainer.step() < trainer.config.iterations {
        let batch = trainer.next_batch(dataset)?;
        let mut noise = ChaCha8Rng::from_rng(&mut trainer.rng);
        last = trainer.train_step(&batch, &mut noise)?;
        let step = trainer.step();
        loss_log.write_record(loss_record(step, &last))?;
        progress(step, &last);
        if step % trainer.config.eval_every == 0 {
            loss_log.flush().map_err(io_err("writing loss log"))?;
            snapshot(trainer)?;
        }
        if step % trainer.config.checkpoint_every == 0 {
            loss_log.flush().map_err(io_err("writing loss log"))?;
            trainer.save_checkpoint(&out.join("checkpoints").join(format!("step-{step:06}")))?;
        }
    }
    loss_log.flush().map_err(io_err("writing loss log"))?;
    trainer.save_checkpoint(&out.join(FINAL_CHECKPOINT))?;
    Ok(TrainReport {
        steps: trainer.step(),
        last,
        probe_iou,
        annotation_reads: trainer.annotation_reads(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
    dtype: String,
    /// Offset into the blob in elements.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    step: u64,
    config: String,
    rng_seed: String,
    /// 128-bit stream position, as a decimal string.
    rng_word_pos: String,
    blob: String,
    /// Blob sections, each laid out tensor by tensor in manifest order.
    sections: Vec<String>,
    tensors: Vec<TensorRecord>,
}

const CHECKPOINT_FORMAT: &str = "meshvae-checkpoint-1";
const CHECKPOINT_MANIFEST: &str = "manifest.json";
const CHECKPOINT_BLOB: &str = "tensors.bin";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2).map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()).collect()
}

/// Writes parameters, ADAM moments and the generator state as a JSON
/// manifest plus a blob of little-endian `f32`s.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let store = &trainer.model.store;
    let mut tensors = Vec::with_capacity(store.entries.len());
    let mut offset = 0;
    for e in &store.entries {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            role: e.role,
            dtype: "f32".into(),
            offset,
        });
        offset += e.data.len();
    }
    let mut blob = Vec::with_capacity(3 * offset * 4);
    let sections = [
        store.entries.iter().map(|e| &e.data).collect::<Vec<_>>(),
        trainer.adam.m.iter().collect(),
        trainer.adam.v.iter().collect(),
    ];
    for section in &sections {
        for v in section.iter().flat_map(|d| d.iter()) {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        step: trainer.adam.step,
        config: trainer.config.to_text(),
        rng_seed: hex(&trainer.rng.get_seed()),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
        blob: CHECKPOINT_BLOB.into(),
        sections: vec!["params".into(), "adam_m".into(), "adam_v".into()],
        tensors,
    };
    write_atomic(&dir.join(CHECKPOINT_BLOB), &blob)?;
    write_atomic(&dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return contract(format!("unsupported checkpoint format {:?}", manifest.format));
    }
    let config = TrainConfig::parse(&manifest.config, &path)?;
    let mut trainer = Trainer::new(config)?;
    let layout: Vec<(&str, &[usize])> = trainer
        .model
        .store
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    let stored: Vec<(&str, &[usize])> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    if layout != stored {
        return Err(Error::Shape("checkpoint tensors do not match the configured network".into()));
    }
    let blob_path = dir.join(&manifest.blob);
    let bytes = std::fs::read(&blob_path).map_err(io_err(format!("reading {}", blob_path.display())))?;
    let total: usize = trainer.model.store.entries.iter().map(|e| e.data.len()).sum();
    if bytes.len() != 3 * total * 4 {
        return Err(Error::Shape(format!(
            "checkpoint blob has {} bytes, expected {}",
            bytes.len(),
            3 * total * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for e in trainer.model.store.entries.iter_mut() {
        e.data.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    for section in [&mut trainer.adam.m, &mut trainer.adam.v] {
        for d in section.iter_mut() {
            d.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
        }
    }
    trainer.adam.step = manifest.step;
    let seed: [u8; 32] = unhex(&manifest.rng_seed)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Contract("malformed generator seed".into()))?;
    let word_pos: u128 = manifest
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Contract("malformed generator position".into()))?;
    trainer.rng = ChaCha8Rng::from_seed(seed);
    trainer.rng.set_word_pos(word_pos);
    Ok(trainer)
}

#[cfg(test)]
mod tests;
