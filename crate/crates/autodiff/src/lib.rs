//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Graph`] tape as row-major matrices. Parameters are
//! stored as `f32` [`Tensor`]s inside [`ParamSet`]s and bound onto a tape on
//! first use; the tape itself is generic over [`Real`] so the same forward
//! code can be replayed in `f64` by finite-difference checks.

mod error;
mod gaussian;
mod graph;
mod nn;
mod optim;
mod real;
mod tensor;

pub use error::AdError;
pub use gaussian::{gaussian_kl, DiagGaussian, GaussianVar, LOG_STD_MAX, LOG_STD_MIN};
pub use graph::{Gradients, Graph, Mat, Perturbation, Var};
pub use nn::{Init, Mlp, OutputAct, ParamSet};
pub use optim::{adam_step, clip_global_norm, ema_update, AdamConfig, AdamMoments};
pub use real::Real;
pub use tensor::Tensor;
