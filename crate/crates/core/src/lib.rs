//! Deformable 3D image registration with a spatially-varying, weighted
//! diffusion regularizer.
//!
//! The objective combines a local NCC similarity, a per-voxel weighted
//! diffusion energy `λ Σ ω(p)‖∇u(p)‖²` and a normalized log penalty `η`
//! pushing the weight volume `ω` towards 1. Deformations can be integrated
//! with scaling and squaring for diffeomorphic results.

pub mod condnet;
pub mod diffeo;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod synth;

pub use error::{Error, Result};
