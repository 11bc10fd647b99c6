//! Sampling-schedule optimization for variance-exploding diffusion models
//! against analytic score models.

pub mod denoiser;
pub mod error;
pub mod fixtures;
pub mod gaussian;
pub mod klub;
pub mod optimizer;
pub mod rng;
pub mod schedule;
pub mod solvers;
pub mod toy_models;

pub use denoiser::Denoiser;
pub use error::{Error, Result};
pub use schedule::{NoiseSpec, Schedule};
pub use solvers::SolverKind;
pub use toy_models::DataModel;
