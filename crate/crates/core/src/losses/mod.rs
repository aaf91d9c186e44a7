//! Loss terms of the registration objective, each with an analytic gradient.
//!
//! The objective is `sim + λ·reg + η·log`, where `sim` is local NCC (plus an
//! optional soft Dice term), `reg` the weighted diffusion energy and `log` the
//! normalized log penalty on the weight volume.

mod dice;
mod diffusion;
mod ncc;
mod weight;

use serde::{Deserialize, Serialize};

pub use dice::{soft_dice_loss, DICE_SMOOTH};
pub use diffusion::{
    diffusion_energy, laplacian_quadratic_form, squared_gradient_norm, weighted_diffusion_energy,
    GridLaplacian,
};
pub use ncc::{local_ncc, NCC_DELTA};
pub use weight::{log_loss, WeightVolume, DEFAULT_EPSILON};

use crate::grid::{VectorField, Volume};

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sim: f64,
    pub reg: f64,
    pub log: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn assemble(sim: f64, reg: f64, log: f64, lambda: f64, eta: f64) -> Self {
        Self {
            sim,
            reg,
            log,
            total: sim + lambda * reg + eta * log,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sim.is_finite() && self.reg.is_finite() && self.log.is_finite() && self.total.is_finite()
    }
}

/// Objective values together with gradients on the displacement and on the
/// full-resolution weight volume.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub grad_u: VectorField,
    pub grad_omega: Volume,
}
