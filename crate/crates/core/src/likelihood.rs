//! Observation model: a Gaussian pyramid over the rendered image with
//! independent Gaussian pixel noise whose scale halves at every level.

use crate::error::{contract, Result};
use crate::image::Image;

/// Separable 5-tap binomial kernel.
const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Image>,
}

impl Pyramid {
    pub fn base(&self) -> &Image {
        &self.levels[0]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.width, l.height)).collect()
    }
}

/// Taps `(source index, normalised weight)` contributing to output `i` along
/// an axis of length `n`; weights renormalised over the in-bounds taps.
fn taps(i: usize, n: usize) -> impl Iterator<Item = (usize, f64)> {
    let centre = 2 * i as isize;
    let valid = move |k: usize| {
        let s = centre + k as isize - 2;
        (s >= 0 && (s as usize) < n).then_some(s as usize)
    };
    let norm: f64 = (0..5).filter(|&k| valid(k).is_some()).map(|k| KERNEL[k]).sum();
    (0..5).filter_map(move |k| valid(k).map(|s| (s, KERNEL[k] / norm)))
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// One blur-and-subsample step.
pub fn downsample(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let (ow, oh) = (half(w), half(h));
    let mut rows = vec![0.0; 3 * ow * h];
    for y in 0..h {
        for ox in 0..ow {
            for (sx, wgt) in taps(ox, w) {
                for c in 0..3 {
                    rows[3 * (y * ow + ox) + c] += wgt * img.data[3 * (y * w + sx) + c];
                }
            }
        }
    }
    let mut out = vec![0.0; 3 * ow * oh];
    for oy in 0..oh {
        for (sy, wgt) in taps(oy, h) {
            for ox in 0..ow {
                for c in 0..3 {
                    out[3 * (oy * ow + ox) + c] += wgt * rows[3 * (sy * ow + ox) + c];
                }
            }
        }
    }
    Image {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Adjoint of [`downsample`] for an input of size `w x h`.
fn downsample_adjoint(grad: &Image, w: usize, h: usize) -> Image {
    let (ow, oh) = (grad.width, grad.height);
    let mut rows = vec![0.0; 3 * ow * h];
    for oy in 0..oh {
        for (sy, wgt) in taps(oy, h) {
            for ox in 0..ow {
                for c in 0..3 {
                    rows[3 * (sy * ow + ox) + c] += wgt * grad.data[3 * (oy * ow + ox) + c];
                }
            }
        }
    }
    let mut out = vec![0.0; 3 * w * h];
    for y in 0..h {
        for ox in 0..ow {
            for (sx, wgt) in taps(ox, w) {
                for c in 0..3 {
                    out[3 * (y * w + sx) + c] += wgt * rows[3 * (y * ow + ox) + c];
                }
            }
        }
    }
    Image {
        width: w,
        height: h,
        data: out,
    }
}

/// Builds levels by repeated downsampling until the smaller side is one pixel.
pub fn build_pyramid(base: &Image) -> Pyramid {
    let mut levels = vec![base.clone()];
    while {
        let last = levels.last().unwrap();
        last.width.min(last.height) > 1
    } {
        let next = downsample(levels.last().unwrap());
        levels.push(next);
    }
    Pyramid { levels }
}

/// Pulls per-level gradients back onto the base image.
pub fn pyramid_backward(level_grads: &[Image]) -> Image {
    let mut acc = level_grads.last().cloned().expect("pyramid has a level");
    for l in (0..level_grads.len() - 1).rev() {
        let below = &level_grads[l];
        let mut g = downsample_adjoint(&acc, below.width, below.height);
        for (a, b) in g.data.iter_mut().zip(&below.data) {
            *a += b;
        }
        acc = g;
    }
    acc
}

fn check_shapes(a: &Pyramid, b: &Pyramid) -> Result<()> {
    if a.shapes() != b.shapes() {
        return contract(format!(
            "pyramid shapes differ: {:?} vs {:?}",
            a.shapes(),
            b.shapes()
        ));
    }
    Ok(())
}

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Sum over levels, pixels and channels of the Gaussian log-density of
/// `observed` around `rendered` with standard deviation `epsilon / 2^l`.
pub fn log_likelihood(observed: &Pyramid, rendered: &Pyramid, epsilon: f64) -> Result<f64> {
    check_shapes(observed, rendered)?;
    let mut total = 0.0;
    for (l, (o, r)) in observed.levels.iter().zip(&rendered.levels).enumerate() {
        let sigma = epsilon / f64::powi(2.0, l as i32);
        let norm = sigma.ln() + HALF_LN_TWO_PI;
        let mut sq = 0.0;
        for (x, m) in o.data.iter().zip(&r.data) {
            let d = x - m;
            sq += d * d;
        }
        total -= 0.5 * sq / (sigma * sigma) + norm * o.data.len() as f64;
    }
    Ok(total)
}

/// Log-likelihood of a rendered base image and its gradient with respect to
/// that image (back through the pyramid).
pub fn log_likelihood_with_grad(
    observed: &Pyramid,
    rendered_base: &Image,
    epsilon: f64,
) -> Result<(f64, Image)> {
    let rendered = build_pyramid(rendered_base);
    let value = log_likelihood(observed, &rendered, epsilon)?;
    let level_grads: Vec<Image> = observed
        .levels
        .iter()
        .zip(&rendered.levels)
        .enumerate()
        .map(|(l, (o, r))| {
            let sigma = epsilon / f64::powi(2.0, l as i32);
            let inv_var = 1.0 / (sigma * sigma);
            Image {
                width: r.width,
                height: r.height,
                data: o
                    .data
                    .iter()
                    .zip(&r.data)
                    .map(|(x, m)| (x - m) * inv_var)
                    .collect(),
            }
        })
        .collect();
    Ok((value, pyramid_backward(&level_grads)))
}

/// Soft silhouette `p / (p + eta)`, per channel.
pub fn binarise_silhouette(img: &Image, eta: f64) -> Image {
    img.map(|p| p / (p + eta))
}

/// Chain rule for [`binarise_silhouette`]: scales `grad` by `eta / (p + eta)^2`.
pub fn binarise_silhouette_backward(img: &Image, grad: &Image, eta: f64) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .zip(&grad.data)
            .map(|(p, g)| g * eta / ((p + eta) * (p + eta)))
            .collect(),
    }
}
