//! Simulation and numerical verification toolkit for one-dimensional
//! symmetric α-stable superprocesses.

pub mod bessel;
pub mod branching;
pub mod decomposition;
pub mod dirichlet_kernel;
pub mod error;
pub mod experiments;
pub mod moments;
pub mod quad;
pub mod rng;
pub mod stable_motion;
pub mod stats;

pub use error::{LabError, Result};
pub use stable_motion::StableLaw;
