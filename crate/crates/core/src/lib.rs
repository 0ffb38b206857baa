//! Distillation of bidirectional denoisers into one-step autoregressive
//! generators on synthetic latent-sequence worlds.

pub mod autograd;
pub mod config;
pub mod consistency;
pub mod curvature;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Mat;
