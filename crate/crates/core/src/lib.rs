//! Dihedral-equivariant convolutional networks for Lamb-wave contact-load
//! detection and localization on a square plate, plus a synthetic guided-wave
//! data generator that makes the whole pipeline verifiable at desk scale.

pub mod analysis;
pub mod autodiff;
pub mod check;
pub mod cli;
pub mod dihedral;
pub mod error;
pub mod layers;
pub mod models;
pub mod scalar;
pub mod signals;
pub mod training;

pub use error::{Error, Result};

/// Default scalar for the pipeline; data files and checkpoints are 64-bit.
pub type Scalar = f64;
pub type Tensor = autodiff::Tensor<Scalar>;
pub type Graph = autodiff::Graph<Scalar>;
