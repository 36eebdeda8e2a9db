//! Priors, variational posteriors and the minibatch training objective.
//!
//! The objective is the negative evidence lower bound with the coarse pose
//! and lighting bins integrated out exactly, the per-sample categorical KL
//! replaced by an L1 penalty between the minibatch-aggregated posterior and
//! the uniform prior, and a beta-weighted diagonal-Gaussian KL for the shape
//! code and the fine angles.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

/// Draws `z ~ N(0, I)`, `theta ~ U(-pi, pi)` and `lambda ~ U[0, pi)`.
pub fn sample_prior<R: Rng>(rng: &mut R, dim: usize) -> (LatentCode, f64, f64) {
    let z = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let theta = rng.random_range(-PI..PI);
    let lambda = rng.random_range(0.0..PI);
    (LatentCode(z), theta, lambda)
}

pub fn reparameterize(mean: &[f64], stddev: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(stddev)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// `KL(N(mean, diag(stddev^2)) || N(0, prior_std^2 I))`, summed over dimensions.
pub fn kl_gaussian(mean: &[f64], stddev: &[f64], prior_std: f64) -> f64 {
    let p2 = prior_std * prior_std;
    mean.iter()
        .zip(stddev)
        .map(|(m, s)| 0.5 * ((m * m + s * s) / p2 - 1.0 - 2.0 * (s / prior_std).ln()))
        .sum()
}

/// Gradients of [`kl_gaussian`] with respect to each mean and stddev.
pub fn kl_gaussian_grad(mean: &[f64], stddev: &[f64], prior_std: f64) -> (Vec<f64>, Vec<f64>) {
    let p2 = prior_std * prior_std;
    (
        mean.iter().map(|m| m / p2).collect(),
        stddev.iter().map(|s| s / p2 - 1.0 / s).collect(),
    )
}

/// L1 distance between the batch-mean categorical posterior and the uniform prior.
pub fn prior_match_l1(probs: &[Vec<f64>]) -> f64 {
    let Some(bins) = probs.first().map(Vec::len) else {
        return 0.0;
    };
    aggregated(probs, bins)
        .iter()
        .map(|m| (m - 1.0 / bins as f64).abs())
        .sum()
}

fn aggregated(probs: &[Vec<f64>], bins: usize) -> Vec<f64> {
    let n = probs.len() as f64;
    (0..bins)
        .map(|r| probs.iter().map(|p| p[r]).sum::<f64>() / n)
        .collect()
}

/// Subgradient of [`prior_match_l1`] with respect to every probability.
pub fn prior_match_l1_grad(probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(bins) = probs.first().map(Vec::len) else {
        return Vec::new();
    };
    let n = probs.len() as f64;
    let signs: Vec<f64> = aggregated(probs, bins)
        .iter()
        .map(|m| {
            let d = m - 1.0 / bins as f64;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    probs
        .iter()
        .map(|_| signs.iter().map(|s| s / n).collect())
        .collect()
}

/// Mean and stddev of a Gaussian over a fine angle, or `None` when that angle
/// is observed (pose supervision, fixed lighting) and carries no KL.
pub type FineAngle = Option<(f64, f64)>;

/// Per-image posterior parameters produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub z_mean: Vec<f64>,
    pub z_std: Vec<f64>,
    /// Probabilities over pose bins; `[1.0]` when the pose is observed.
    pub theta_probs: Vec<f64>,
    pub theta_fine: FineAngle,
    /// Probabilities over lighting bins; `[1.0]` when lighting is known.
    pub light_probs: Vec<f64>,
    pub light_fine: FineAngle,
}

impl VariationalParams {
    pub fn validate(&self) -> Result<()> {
        for (name, probs) in [("theta", &self.theta_probs), ("lambda", &self.light_probs)] {
            let sum: f64 = probs.iter().sum();
            if probs.is_empty() || (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| p < 0.0) {
                return contract(format!("{name} probabilities must form a distribution"));
            }
        }
        let stds = self
            .z_std
            .iter()
            .chain(self.theta_fine.iter().map(|f| &f.1))
            .chain(self.light_fine.iter().map(|f| &f.1));
        for &s in stds {
            if !(s > 0.0) {
                return contract("posterior standard deviations must be positive");
            }
        }
        if self.z_mean.len() != self.z_std.len() {
            return Err(Error::Shape("z mean and stddev lengths differ".into()));
        }
        Ok(())
    }

    /// Prior stddevs of the fine angles: half a bin width, with pose bins
    /// spanning the full turn and lighting bins the half turn.
    pub fn fine_prior_stds(&self) -> (f64, f64) {
        (
            PI / self.theta_probs.len() as f64,
            PI / (2.0 * self.light_probs.len() as f64),
        )
    }

    /// KL of the Gaussian part of the posterior against its prior.
    pub fn kl(&self) -> f64 {
        let (st, sl) = self.fine_prior_stds();
        let mut kl = kl_gaussian(&self.z_mean, &self.z_std, 1.0);
        if let Some((m, s)) = self.theta_fine {
            kl += kl_gaussian(&[m], &[s], st);
        }
        if let Some((m, s)) = self.light_fine {
            kl += kl_gaussian(&[m], &[s], sl);
        }
        kl
    }
}

/// Per-image, per-bin reconstruction log-likelihoods, indexed
/// `[image][pose bin][lighting bin]` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTable {
    pub images: usize,
    pub theta_bins: usize,
    pub light_bins: usize,
    pub values: Vec<f64>,
}

impl ReconTable {
    pub fn new(images: usize, theta_bins: usize, light_bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != images * theta_bins * light_bins {
            return Err(Error::Shape(format!(
                "table of {images}x{theta_bins}x{light_bins} needs {} values, got {}",
                images * theta_bins * light_bins,
                values.len()
            )));
        }
        Ok(ReconTable {
            images,
            theta_bins,
            light_bins,
            values,
        })
    }

    #[inline]
    pub fn at(&self, i: usize, rt: usize, rl: usize) -> f64 {
        self.values[(i * self.theta_bins + rt) * self.light_bins + rl]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub theta_match: f64,
    pub light_match: f64,
    pub kl: f64,
    pub total: f64,
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub table: Vec<f64>,
    pub params: Vec<VariationalParams>,
}

fn check_batch(table: &ReconTable, params: &[VariationalParams]) -> Result<()> {
    if params.len() != table.images || params.is_empty() {
        return Err(Error::Shape(format!(
            "{} images in the table but {} posteriors",
            table.images,
            params.len()
        )));
    }
    for p in params {
        if p.theta_probs.len() != table.theta_bins || p.light_probs.len() != table.light_bins {
            return Err(Error::Shape(format!(
                "posterior has {}x{} bins, table has {}x{}",
                p.theta_probs.len(),
                p.light_probs.len(),
                table.theta_bins,
                table.light_bins
            )));
        }
    }
    Ok(())
}

/// The minibatch loss: expected negative log-likelihood over the coarse bins,
/// alpha-weighted prior matching for both angles, beta-weighted KL.
pub fn assemble_loss(
    table: &ReconTable,
    params: &[VariationalParams],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    check_batch(table, params)?;
    let n = params.len() as f64;
    let mut reconstruction = 0.0;
    for (i, p) in params.iter().enumerate() {
        for (rt, pt) in p.theta_probs.iter().enumerate() {
            for (rl, pl) in p.light_probs.iter().enumerate() {
                reconstruction -= table.at(i, rt, rl) * pt * pl;
            }
        }
    }
    reconstruction /= n;
    let thetas: Vec<Vec<f64>> = params.iter().map(|p| p.theta_probs.clone()).collect();
    let lights: Vec<Vec<f64>> = params.iter().map(|p| p.light_probs.clone()).collect();
    let theta_match = prior_match_l1(&thetas);
    let light_match = prior_match_l1(&lights);
    let kl = params.iter().map(VariationalParams::kl).sum::<f64>() / n;
    Ok(LossBreakdown {
        reconstruction,
        theta_match,
        light_match,
        kl,
        total: reconstruction + weights.alpha * (theta_match + light_match) + weights.beta * kl,
    })
}

pub fn assemble_loss_grad(
    table: &ReconTable,
    params: &[VariationalParams],
    weights: LossWeights,
) -> Result<LossGrads> {
    check_batch(table, params)?;
    let n = params.len() as f64;
    let thetas: Vec<Vec<f64>> = params.iter().map(|p| p.theta_probs.clone()).collect();
    let lights: Vec<Vec<f64>> = params.iter().map(|p| p.light_probs.clone()).collect();
    let theta_match = prior_match_l1_grad(&thetas);
    let light_match = prior_match_l1_grad(&lights);
    let mut d_table = vec![0.0; table.values.len()];
    let mut grads = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let mut d_theta: Vec<f64> = theta_match[i].iter().map(|g| weights.alpha * g).collect();
        let mut d_light: Vec<f64> = light_match[i].iter().map(|g| weights.alpha * g).collect();
        for (rt, pt) in p.theta_probs.iter().enumerate() {
            for (rl, pl) in p.light_probs.iter().enumerate() {
                let l = table.at(i, rt, rl);
                d_table[(i * table.theta_bins + rt) * table.light_bins + rl] = -pt * pl / n;
                d_theta[rt] -= l * pl / n;
                d_light[rl] -= l * pt / n;
            }
        }
        let (st, sl) = p.fine_prior_stds();
        let scale = weights.beta / n;
        let (dzm, dzs) = kl_gaussian_grad(&p.z_mean, &p.z_std, 1.0);
        let fine = |f: FineAngle, prior: f64| {
            f.map(|(m, s)| {
                let (dm, ds) = kl_gaussian_grad(&[m], &[s], prior);
                (scale * dm[0], scale * ds[0])
            })
        };
        grads.push(VariationalParams {
            z_mean: dzm.iter().map(|g| scale * g).collect(),
            z_std: dzs.iter().map(|g| scale * g).collect(),
            theta_probs: d_theta,
            theta_fine: fine(p.theta_fine, st),
            light_probs: d_light,
            light_fine: fine(p.light_fine, sl),
        });
    }
    Ok(LossGrads {
        table: d_table,
        params: grads,
    })
}
