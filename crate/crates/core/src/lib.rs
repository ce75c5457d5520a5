//! One-step, mid-timestep guided latent diffusion super-resolution at toy scale.

pub mod checkpoint;
pub mod chunking;
pub mod cli;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod midstep;
pub mod models;
pub mod nn;
pub mod predict;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, LatentOrigin, LatentTensor, Tensor};
