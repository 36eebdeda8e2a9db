//! Convolutional encoder and fully-connected decoder, built on a small
//! reverse-mode differentiation tape.

mod params;
mod tape;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{round_f32, ParamEntry, ParamRole, ParamStore, INIT_STD};
pub use tape::{BatchNormParams, BatchStats, Mode, NodeId, Tape, Tensor, BN_EPS, BN_MOMENTUM};

use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::latent::VariationalParams;
use crate::mesh::{MeshKind, MeshParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    /// Output channels of the five convolutions.
    pub channels: [usize; 5],
    pub feature: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub theta_bins: usize,
    pub light_bins: usize,
    /// Whether the encoder predicts pose (false under pose supervision).
    pub infer_pose: bool,
    /// Whether the encoder predicts lighting (false for fixed lighting).
    pub infer_light: bool,
    pub kind: MeshKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 128,
            height: 96,
            channels: [32, 64, 96, 128, 128],
            feature: 128,
            latent_dim: 12,
            decoder_hidden: 32,
            theta_bins: 12,
            light_bins: 3,
            infer_pose: true,
            infer_light: true,
            kind: MeshKind::Subdivision { segments: 4 },
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.channels.contains(&0) || self.feature == 0 || self.latent_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.theta_bins == 0 || self.light_bins == 0 {
            return Err(Error::Config("bin counts must be positive".into()));
        }
        if self.kind.param_len() == 0 {
            return Err(Error::Config("mesh parameterisation is empty".into()));
        }
        Ok(())
    }

    /// Spatial size after the convolution stack.
    fn trunk_size(&self) -> (usize, usize) {
        let mut h = self.height.div_ceil(2);
        let mut w = self.width.div_ceil(2);
        for _ in 0..3 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    w: usize,
    b: usize,
    bn: BatchNormParams,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct AngleHead {
    logits: Dense,
    mean: Dense,
    std: Dense,
    bins: usize,
    /// Bound on the fine-angle mean.
    bound: f64,
}

/// Tape nodes of one angle's posterior: probabilities `[N, R]`, fine mean and
/// stddev `[N, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct AngleNodes {
    pub probs: NodeId,
    pub mean: NodeId,
    pub std: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub z_mean: NodeId,
    pub z_std: NodeId,
    pub theta: Option<AngleNodes>,
    pub light: Option<AngleNodes>,
}

fn dense<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, name: &str, i: usize, o: usize, role: ParamRole) -> Result<Dense> {
    Ok(Dense {
        w: store.add_weight(rng, &format!("{name}.w"), vec![i, o], role)?,
        b: store.add_zeros(&format!("{name}.b"), vec![o], role)?,
    })
}

fn apply_dense(tape: &mut Tape, store: &ParamStore, x: NodeId, d: Dense) -> Result<NodeId> {
    let w = tape.param(store, d.w);
    let b = tape.param(store, d.b);
    tape.linear(x, w, b)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<ConvBlock>,
    fc: Dense,
    fc_bn: BatchNormParams,
    z_mean: Dense,
    z_std: Dense,
    theta: Option<AngleHead>,
    light: Option<AngleHead>,
    width: usize,
    height: usize,
}

impl Encoder {
    fn build<R: rand::Rng>(cfg: &NetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut inputs = 3;
        for (i, &out) in cfg.channels.iter().enumerate() {
            let k = if i == 4 { 4 } else { 3 };
            let name = format!("enc.conv{}", i + 1);
            convs.push(ConvBlock {
                w: store.add_weight(rng, &format!("{name}.w"), vec![out, inputs, k, k], ParamRole::Weight)?,
                b: store.add_zeros(&format!("{name}.b"), vec![out], ParamRole::Weight)?,
                bn: store.add_batch_norm(&format!("{name}.bn"), out)?,
                stride: if i == 0 { 2 } else { 1 },
            });
            inputs = out;
        }
        let (th, tw) = cfg.trunk_size();
        let flat = cfg.channels[4] * th * tw;
        let fc = dense(store, rng, "enc.fc", flat, cfg.feature, ParamRole::Weight)?;
        let fc_bn = store.add_batch_norm("enc.fc.bn", cfg.feature)?;
        let f = cfg.feature;
        let z_mean = dense(store, rng, "enc.z_mean", f, cfg.latent_dim, ParamRole::Weight)?;
        let z_std = dense(store, rng, "enc.z_std", f, cfg.latent_dim, ParamRole::Weight)?;
        let mut angle = |name: &str, bins: usize, bound: f64| -> Result<AngleHead> {
            Ok(AngleHead {
                logits: dense(store, rng, &format!("enc.{name}.logits"), f, bins, ParamRole::Weight)?,
                mean: dense(store, rng, &format!("enc.{name}.mean"), f, 1, ParamRole::Weight)?,
                std: dense(store, rng, &format!("enc.{name}.std"), f, 1, ParamRole::Weight)?,
                bins,
                bound,
            })
        };
        let theta = if cfg.infer_pose {
            Some(angle("theta", cfg.theta_bins, PI / cfg.theta_bins as f64)?)
        } else {
            None
        };
        let light = if cfg.infer_light {
            Some(angle("light", cfg.light_bins, PI / cfg.light_bins as f64)?)
        } else {
            None
        };
        Ok(Encoder {
            convs,
            fc,
            fc_bn,
            z_mean,
            z_std,
            theta,
            light,
            width: cfg.width,
            height: cfg.height,
        })
    }

    /// Records the encoder on `tape` for a batch `x` of shape `[N, 3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, mode: Mode) -> Result<EncoderNodes> {
        let shape = tape.value(x).shape.clone();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::Shape(format!(
                "encoder expects [N, 3, {}, {}], got {shape:?}",
                self.height, self.width
            )));
        }
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            let w = tape.param(store, c.w);
            let b = tape.param(store, c.b);
            h = tape.conv2d(h, w, b, c.stride)?;
            h = tape.batch_norm(store, h, c.bn, mode)?;
            h = tape.relu(h);
            if (1..=3).contains(&i) {
                h = tape.max_pool(h)?;
            }
        }
        let n = shape[0];
        let flat = tape.value(h).len() / n;
        h = tape.reshape(h, vec![n, flat])?;
        h = apply_dense(tape, store, h, self.fc)?;
        h = tape.batch_norm(store, h, self.fc_bn, mode)?;
        let feature = tape.relu(h);
        let z_mean = apply_dense(tape, store, feature, self.z_mean)?;
        let raw = apply_dense(tape, store, feature, self.z_std)?;
        let z_std = tape.softplus(raw);
        let mut angle = |head: Option<AngleHead>| -> Result<Option<AngleNodes>> {
            let Some(a) = head else { return Ok(None) };
            let logits = apply_dense(tape, store, feature, a.logits)?;
            let probs = tape.softmax(logits)?;
            let raw = apply_dense(tape, store, feature, a.mean)?;
            let t = tape.tanh(raw);
            let mean = tape.scale(t, a.bound);
            let raw = apply_dense(tape, store, feature, a.std)?;
            let std = tape.softplus(raw);
            Ok(Some(AngleNodes { probs, mean, std }))
        };
        let theta = angle(self.theta)?;
        let light = angle(self.light)?;
        Ok(EncoderNodes {
            z_mean,
            z_std,
            theta,
            light,
        })
    }

    pub fn theta_bins(&self) -> Option<usize> {
        self.theta.map(|a| a.bins)
    }

    pub fn light_bins(&self) -> Option<usize> {
        self.light.map(|a| a.bins)
    }
}

/// Stacks images into a `[N, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return contract("no images to stack");
    };
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if !img.same_size(first) {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend(img.to_planar());
    }
    Tensor::new(vec![images.len(), 3, first.height, first.width], data)
}

/// Reads per-image posteriors out of evaluated encoder nodes. Observed angles
/// get the single-bin posterior with no fine Gaussian.
pub fn read_posteriors(tape: &Tape, nodes: &EncoderNodes) -> Vec<VariationalParams> {
    let zm = tape.value(nodes.z_mean);
    let zs = tape.value(nodes.z_std);
    let angle = |a: Option<AngleNodes>, i: usize| match a {
        Some(a) => (
            tape.value(a.probs).row(i).to_vec(),
            Some((tape.value(a.mean).data[i], tape.value(a.std).data[i])),
        ),
        None => (vec![1.0], None),
    };
    (0..zm.shape[0])
        .map(|i| {
            let (theta_probs, theta_fine) = angle(nodes.theta, i);
            let (light_probs, light_fine) = angle(nodes.light, i);
            VariationalParams {
                z_mean: zm.row(i).to_vec(),
                z_std: zs.row(i).to_vec(),
                theta_probs,
                theta_fine,
                light_probs,
                light_fine,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Decoder {
    hidden: Dense,
    main: Dense,
    rotation: Option<Dense>,
    main_columns: Vec<usize>,
    rotation_columns: Vec<usize>,
    kind: MeshKind,
    latent_dim: usize,
}

impl Decoder {
    fn build<R: rand::Rng>(cfg: &NetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let hidden = dense(store, rng, "dec.hidden", cfg.latent_dim, cfg.decoder_hidden, ParamRole::Weight)?;
        let rotation_columns = cfg.kind.rotation_indices();
        let main_columns: Vec<usize> = (0..cfg.kind.param_len())
            .filter(|i| !rotation_columns.contains(i))
            .collect();
        let main = dense(store, rng, "dec.out", cfg.decoder_hidden, main_columns.len(), ParamRole::Weight)?;
        let rotation = if rotation_columns.is_empty() {
            None
        } else {
            Some(dense(
                store,
                rng,
                "dec.rotation",
                cfg.decoder_hidden,
                rotation_columns.len(),
                ParamRole::SlowWeight,
            )?)
        };
        Ok(Decoder {
            hidden,
            main,
            rotation,
            main_columns,
            rotation_columns,
            kind: cfg.kind,
            latent_dim: cfg.latent_dim,
        })
    }

    /// Records the decoder for codes `z` of shape `[N, D]`, giving `[N, P]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let shape = &tape.value(z).shape;
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::Shape(format!(
                "decoder expects [N, {}], got {shape:?}",
                self.latent_dim
            )));
        }
        let h = apply_dense(tape, store, z, self.hidden)?;
        let h = tape.relu(h);
        let main = apply_dense(tape, store, h, self.main)?;
        let out = match self.rotation {
            None => main,
            Some(r) => {
                let rot = apply_dense(tape, store, h, r)?;
                tape.scatter_columns(
                    vec![(main, self.main_columns.clone()), (rot, self.rotation_columns.clone())],
                    self.kind.param_len(),
                )?
            }
        };
        tape.softplus_columns(out, &self.kind.scale_indices())
    }

    pub fn kind(&self) -> MeshKind {
        self.kind
    }
}

/// The encoder, decoder and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the networks and initialises parameters from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&config, &mut store, &mut rng)?;
        let decoder = Decoder::build(&config, &mut store, &mut rng)?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the layer layout for `config` around existing parameters.
    pub fn with_store(config: NetConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Model::new(config, 0)?;
        let layout: Vec<_> = fresh.store.entries.iter().map(|e| (&e.name, &e.shape)).collect();
        let given: Vec<_> = store.entries.iter().map(|e| (&e.name, &e.shape)).collect();
        if layout != given {
            return Err(Error::Shape("stored parameters do not match the network layout".into()));
        }
        fresh.store = store;
        Ok(fresh)
    }

    pub fn encode(&self, images: &[&Image], mode: Mode) -> Result<Vec<VariationalParams>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images_to_tensor(images)?);
        let nodes = self.encoder.forward(&mut tape, &self.store, x, mode)?;
        Ok(read_posteriors(&tape, &nodes))
    }

    pub fn decode(&self, z: &[f64]) -> Result<MeshParams> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let out = self.decoder.forward(&mut tape, &self.store, x)?;
        MeshParams::new(self.decoder.kind, tape.value(out).data.clone())
    }
}

/// Pools the shape code of several views of one object: each dimension of the
/// mean takes its maximum over views, and the stddev comes from the view that
/// attained it. Pose and lighting stay per view.
pub fn pool_multiview(views: &[VariationalParams]) -> Result<Vec<VariationalParams>> {
    let Some(first) = views.first() else {
        return contract("pooling needs at least one view");
    };
    let d = first.z_mean.len();
    if views.iter().any(|v| v.z_mean.len() != d || v.z_std.len() != d) {
        return Err(Error::Shape("views disagree on latent size".into()));
    }
    let mut mean = first.z_mean.clone();
    let mut std = first.z_std.clone();
    for v in &views[1..] {
        for k in 0..d {
            if v.z_mean[k] > mean[k] {
                mean[k] = v.z_mean[k];
                std[k] = v.z_std[k];
            }
        }
    }
    Ok(views
        .iter()
        .map(|v| VariationalParams {
            z_mean: mean.clone(),
            z_std: std.clone(),
            ..v.clone()
        })
        .collect())
}

/// Tape version of [`pool_multiview`] for `[N * V, D]` rows ordered object-major.
/// Returns pooled `[N, D]` mean and stddev nodes.
pub fn pool_views(tape: &mut Tape, z_mean: NodeId, z_std: NodeId, views: usize) -> Result<(NodeId, NodeId)> {
    let shape = tape.value(z_mean).shape.clone();
    if views == 0 || shape.len() != 2 || shape[0] % views != 0 {
        return Err(Error::Shape(format!("cannot pool {shape:?} over {views} views")));
    }
    let (rows, d) = (shape[0], shape[1]);
    let m = &tape.value(z_mean).data;
    let mut source = Vec::with_capacity(rows / views * d);
    for obj in 0..rows / views {
        for k in 0..d {
            let mut best = obj * views * d + k;
            for v in 1..views {
                let i = (obj * views + v) * d + k;
                if m[i] > m[best] {
                    best = i;
                }
            }
            source.push(best);
        }
    }
    let mean = tape.gather(z_mean, source.clone(), d)?;
    let std = tape.gather(z_std, source, d)?;
    Ok((mean, std))
}

#[cfg(test)]
mod tests;
