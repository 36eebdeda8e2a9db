//! Learning a generative model of 3D mesh shape, pose and lighting from
//! single 2D images, by variational inference through a differentiable
//! mesh renderer.

pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod likelihood;
pub mod mesh;
pub mod nets;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
